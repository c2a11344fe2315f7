use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, DenseLayer, DenseTrace};
use super::{ParamBlocks, ParamMut, ParamRef};
use crate::error::{Error, Result};
use crate::normalization::{
    adaptive_backward, adaptive_forward, AdaptiveNormParams, NormForwardTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveNormSpec {
    pub use_gate: bool,
}

/// Shape of a feed-forward network over an `input_rows × input_cols` window
/// plus `extra_inputs` scalars appended after flattening.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_rows: usize,
    pub input_cols: usize,
    #[serde(default)]
    pub extra_inputs: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: Activation,
    #[serde(default)]
    pub adaptive_norm: Option<AdaptiveNormSpec>,
}

impl NetworkSpec {
    /// Two hidden relu layers of 64 units producing raw logits.
    pub fn classifier(input_rows: usize, input_cols: usize, classes: usize) -> Self {
        NetworkSpec {
            input_rows,
            input_cols,
            extra_inputs: 0,
            hidden: vec![64, 64],
            output_dim: classes,
            activation: Activation::Relu,
            output_activation: Activation::Identity,
            adaptive_norm: None,
        }
    }

    pub fn flat_inputs(&self) -> usize {
        self.input_rows * self.input_cols + self.extra_inputs
    }

    fn layer_dims(&self) -> Vec<(usize, usize, Activation)> {
        let mut dims = Vec::new();
        let mut prev = self.flat_inputs();
        for &h in &self.hidden {
            dims.push((prev, h, self.activation));
            prev = h;
        }
        dims.push((prev, self.output_dim, self.output_activation));
        dims
    }
}

/// Optional adaptive normalization front followed by dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    pub norm: Option<AdaptiveNormParams>,
    pub layers: Vec<DenseLayer>,
    version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTrace {
    version: u64,
    pub norm: Option<NormForwardTrace>,
    pub layers: Vec<DenseTrace>,
}

/// Gradients laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub norm: Option<AdaptiveNormParams>,
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBackward {
    pub grads: NetworkGrads,
    pub d_window: Array2<f64>,
    pub d_extra: Array1<f64>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o, a)| DenseLayer::new(i, o, a, rng))
            .collect();
        let norm = spec
            .adaptive_norm
            .map(|_| AdaptiveNormParams::identity(spec.input_cols));
        Network {
            spec,
            norm,
            layers,
            version: 0,
        }
    }

    /// All weights and biases zero; the adaptive front, if any, at its identity init.
    pub fn zeros(spec: NetworkSpec) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o, a)| DenseLayer::zeros(i, o, a))
            .collect();
        let norm = spec
            .adaptive_norm
            .map(|_| AdaptiveNormParams::identity(spec.input_cols));
        Network {
            spec,
            norm,
            layers,
            version: 0,
        }
    }

    /// Assembles a network from explicit parts, checking that dimensions chain.
    pub fn from_parts(
        spec: NetworkSpec,
        norm: Option<AdaptiveNormParams>,
        layers: Vec<DenseLayer>,
    ) -> Result<Self> {
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::Shape(format!(
                "spec describes {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (k, ((i, o, a), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.inputs() != *i || layer.outputs() != *o || layer.activation != *a {
                return Err(Error::Shape(format!(
                    "layer {k} is {}x{} {:?}, spec expects {o}x{i} {a:?}",
                    layer.outputs(),
                    layer.inputs(),
                    layer.activation
                )));
            }
            if layer.bias.len() != *o {
                return Err(Error::Shape(format!("layer {k} bias length mismatch")));
            }
        }
        match (&spec.adaptive_norm, &norm) {
            (Some(_), Some(p)) => {
                p.validate()?;
                if p.dim() != spec.input_cols {
                    return Err(Error::Shape(format!(
                        "normalization layer has {} columns, input has {}",
                        p.dim(),
                        spec.input_cols
                    )));
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::Shape(
                    "adaptive normalization presence disagrees with spec".into(),
                ))
            }
        }
        Ok(Network {
            spec,
            norm,
            layers,
            version: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Bumped by every mutable parameter access.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn use_gate(&self) -> bool {
        self.spec.adaptive_norm.is_some_and(|n| n.use_gate)
    }

    pub fn forward(&self, window: ArrayView2<f64>, extra: &[f64]) -> Result<(Array1<f64>, NetworkTrace)> {
        let spec = &self.spec;
        if window.dim() != (spec.input_rows, spec.input_cols) {
            return Err(Error::Shape(format!(
                "window is {}x{}, network expects {}x{}",
                window.nrows(),
                window.ncols(),
                spec.input_rows,
                spec.input_cols
            )));
        }
        if extra.len() != spec.extra_inputs {
            return Err(Error::Shape(format!(
                "network expects {} extra inputs, got {}",
                spec.extra_inputs,
                extra.len()
            )));
        }
        let norm = match &self.norm {
            Some(p) => Some(adaptive_forward(window, p, self.use_gate())?),
            None => None,
        };
        let body = norm.as_ref().map_or(window, |t| t.output.view());
        let mut x: Array1<f64> = body.iter().copied().chain(extra.iter().copied()).collect();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let t = layer.forward(&x)?;
            x = t.output.clone();
            traces.push(t);
        }
        Ok((
            x,
            NetworkTrace {
                version: self.version,
                norm,
                layers: traces,
            },
        ))
    }

    pub fn predict(&self, window: ArrayView2<f64>, extra: &[f64]) -> Result<Array1<f64>> {
        self.forward(window, extra).map(|(out, _)| out)
    }

    pub fn backward(&self, trace: &NetworkTrace, d_output: &Array1<f64>) -> Result<NetworkBackward> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                network: self.version,
            });
        }
        if d_output.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, network outputs {}",
                d_output.len(),
                self.output_dim()
            )));
        }
        let mut grad = d_output.clone();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, t) in self.layers.iter().zip(&trace.layers).rev() {
            let (d_in, dw, db) = layer.backward(t, &grad);
            layer_grads.push((dw, db));
            grad = d_in;
        }
        layer_grads.reverse();
        let (rows, cols) = (self.spec.input_rows, self.spec.input_cols);
        let body = rows * cols;
        let d_body = Array2::from_shape_vec((rows, cols), grad.slice(ndarray::s![..body]).to_vec())
            .expect("flattened window shape");
        let d_extra = grad.slice(ndarray::s![body..]).to_owned();
        let (norm, d_window) = match (&self.norm, &trace.norm) {
            (Some(p), Some(t)) => {
                let b = adaptive_backward(t, p, d_body.view())?;
                (Some(b.params), b.input)
            }
            _ => (None, d_body),
        };
        Ok(NetworkBackward {
            grads: NetworkGrads {
                norm,
                layers: layer_grads,
            },
            d_window,
            d_extra,
        })
    }
}

impl NetworkGrads {
    pub fn zeros_like(net: &Network) -> Self {
        NetworkGrads {
            norm: net.norm.as_ref().map(AdaptiveNormParams::zeros_like),
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &NetworkGrads, scale: f64) {
        for ((_, a), b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, a) in self.blocks_mut() {
            a.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

fn norm_refs<'a>(p: &'a AdaptiveNormParams) -> Vec<ParamRef<'a>> {
    let d = p.dim();
    p.blocks()
        .into_iter()
        .map(|(name, data)| ParamRef {
            name: format!("norm.{name}"),
            shape: if name.starts_with('w') { vec![d, d] } else { vec![d] },
            data,
        })
        .collect()
}

fn dense_refs<'a>(
    layers: impl Iterator<Item = (&'a Array2<f64>, &'a Array1<f64>)>,
    prefix: &str,
) -> Vec<ParamRef<'a>> {
    layers
        .enumerate()
        .flat_map(|(k, (w, b))| {
            [
                ParamRef {
                    name: format!("{prefix}{k}.weight"),
                    shape: w.shape().to_vec(),
                    data: w.as_slice().expect("contiguous"),
                },
                ParamRef {
                    name: format!("{prefix}{k}.bias"),
                    shape: vec![b.len()],
                    data: b.as_slice().expect("contiguous"),
                },
            ]
        })
        .collect()
}

fn dense_muts<'a>(
    layers: impl Iterator<Item = (&'a mut Array2<f64>, &'a mut Array1<f64>)>,
    prefix: &str,
) -> Vec<ParamMut<'a>> {
    layers
        .enumerate()
        .flat_map(|(k, (w, b))| {
            [
                (format!("{prefix}{k}.weight"), w.as_slice_mut().expect("contiguous")),
                (format!("{prefix}{k}.bias"), b.as_slice_mut().expect("contiguous")),
            ]
        })
        .collect()
}

impl ParamBlocks for Network {
    fn blocks(&self) -> Vec<ParamRef<'_>> {
        let mut out = self.norm.as_ref().map(norm_refs).unwrap_or_default();
        out.extend(dense_refs(
            self.layers.iter().map(|l| (&l.weights, &l.bias)),
            "dense",
        ));
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.version += 1;
        let mut out: Vec<ParamMut<'_>> = match self.norm.as_mut() {
            Some(p) => p
                .blocks_mut()
                .into_iter()
                .map(|(n, d)| (format!("norm.{n}"), d))
                .collect(),
            None => Vec::new(),
        };
        out.extend(dense_muts(
            self.layers.iter_mut().map(|l| (&mut l.weights, &mut l.bias)),
            "dense",
        ));
        out
    }
}

impl ParamBlocks for NetworkGrads {
    fn blocks(&self) -> Vec<ParamRef<'_>> {
        let mut out = self.norm.as_ref().map(norm_refs).unwrap_or_default();
        out.extend(dense_refs(self.layers.iter().map(|(w, b)| (w, b)), "dense"));
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out: Vec<ParamMut<'_>> = match self.norm.as_mut() {
            Some(p) => p
                .blocks_mut()
                .into_iter()
                .map(|(n, d)| (format!("norm.{n}"), d))
                .collect(),
            None => Vec::new(),
        };
        out.extend(dense_muts(self.layers.iter_mut().map(|(w, b)| (w, b)), "dense"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = Network::zeros(NetworkSpec::classifier(4, 3, 3));
        let x = Array2::from_elem((4, 3), 1.7);
        assert!(net.predict(x.view(), &[]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_returns_flattened_input() {
        let spec = NetworkSpec {
            input_rows: 2,
            input_cols: 3,
            extra_inputs: 0,
            hidden: vec![],
            output_dim: 6,
            activation: Activation::Identity,
            output_activation: Activation::Identity,
            adaptive_norm: None,
        };
        let mut net = Network::zeros(spec);
        net.layers[0].weights = Array2::eye(6);
        let x = ndarray::array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(net.predict(x.view(), &[]).unwrap().to_vec(), x.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = NetworkSpec::classifier(5, 2, 3);
        let a = Network::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(9));
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64 * 0.1);
        let la = a.predict(x.view(), &[]).unwrap();
        assert_eq!(la, a.predict(x.view(), &[]).unwrap());
        assert_eq!(la, b.predict(x.view(), &[]).unwrap());
    }

    #[test]
    fn shape_errors() {
        let net = Network::zeros(NetworkSpec::classifier(4, 3, 3));
        assert!(matches!(
            net.predict(Array2::zeros((3, 3)).view(), &[]).unwrap_err(),
            Error::Shape(_)
        ));
        assert!(matches!(
            net.predict(Array2::zeros((4, 3)).view(), &[1.0]).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn stale_trace_rejected() {
        let mut net = Network::new(NetworkSpec::classifier(2, 2, 3), &mut ChaCha8Rng::seed_from_u64(1));
        let (_, trace) = net.forward(Array2::ones((2, 2)).view(), &[]).unwrap();
        net.blocks_mut();
        assert!(matches!(
            net.backward(&trace, &Array1::ones(3)).unwrap_err(),
            Error::StaleTrace { .. }
        ));
    }

    #[test]
    fn zero_and_duplicated_gradients() {
        let mut spec = NetworkSpec::classifier(3, 2, 3);
        spec.adaptive_norm = Some(AdaptiveNormSpec { use_gate: true });
        let net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(4));
        let x = ndarray::array![[0.1, 2.0], [0.4, -1.0], [0.3, 0.5]];
        let (_, trace) = net.forward(x.view(), &[]).unwrap();
        let zero = net.backward(&trace, &Array1::zeros(3)).unwrap();
        assert!(zero.grads.blocks().iter().all(|b| b.data.iter().all(|v| *v == 0.0)));

        let g = net.backward(&trace, &ndarray::array![0.3, -0.2, 0.1]).unwrap().grads;
        let mut sum = NetworkGrads::zeros_like(&net);
        sum.add_scaled(&g, 1.0);
        sum.add_scaled(&g, 1.0);
        for (a, b) in sum.blocks().iter().zip(g.blocks()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert_eq!(*x, 2.0 * y);
            }
        }
    }

    #[test]
    fn from_parts_checks_dims() {
        let spec = NetworkSpec::classifier(2, 2, 3);
        let net = Network::zeros(spec.clone());
        assert!(Network::from_parts(spec.clone(), None, net.layers.clone()).is_ok());
        let mut layers = net.layers.clone();
        layers.pop();
        assert!(Network::from_parts(spec, None, layers).is_err());
    }
}
