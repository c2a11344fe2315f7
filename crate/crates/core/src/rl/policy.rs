use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backtest::Position;
use crate::env::{EnvState, OBS_EXTRAS};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, AdaptiveNormSpec, Checkpoint, DenseLayer, DenseTrace, Network, NetworkGrads,
    NetworkSpec, NetworkTrace, ParamBlocks, ParamMut, ParamRef,
};
use crate::supervised::argmax;

pub const NUM_ACTIONS: usize = 3;

/// What the agent sees at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub window: Array2<f64>,
    pub extras: Vec<f64>,
}

impl From<&EnvState> for Observation {
    fn from(s: &EnvState) -> Self {
        Observation {
            window: s.observation.matrix.clone(),
            extras: s.extras.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub trunk: NetworkSpec,
}

impl PolicySpec {
    /// Trunk over an environment observation; the last hidden size is the
    /// feature width shared by both heads.
    pub fn new(window_len: usize, feature_cols: usize, hidden: &[usize], adaptive_norm: Option<AdaptiveNormSpec>) -> Result<Self> {
        let (&width, rest) = hidden
            .split_last()
            .ok_or_else(|| Error::Config("policy trunk needs at least one hidden layer".into()))?;
        Ok(PolicySpec {
            trunk: NetworkSpec {
                input_rows: window_len,
                input_cols: feature_cols,
                extra_inputs: OBS_EXTRAS,
                hidden: rest.to_vec(),
                output_dim: width,
                activation: Activation::Relu,
                output_activation: Activation::Relu,
                adaptive_norm,
            },
        })
    }
}

/// Shared trunk with a 3-way action head and a scalar value head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    spec: PolicySpec,
    pub trunk: Network,
    pub policy: DenseLayer,
    pub value: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrace {
    trunk: NetworkTrace,
    policy: DenseTrace,
    value: DenseTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub trunk: NetworkGrads,
    pub policy: (Array2<f64>, Array1<f64>),
    pub value: (Array2<f64>, Array1<f64>),
}

impl PolicyNetwork {
    pub fn new<R: Rng + ?Sized>(spec: PolicySpec, rng: &mut R) -> Self {
        let trunk = Network::new(spec.trunk.clone(), rng);
        let width = spec.trunk.output_dim;
        let mut policy = DenseLayer::new(width, NUM_ACTIONS, Activation::Identity, rng);
        policy.weights *= 0.01;
        let value = DenseLayer::new(width, 1, Activation::Identity, rng);
        PolicyNetwork {
            spec,
            trunk,
            policy,
            value,
        }
    }

    pub fn zeros(spec: PolicySpec) -> Self {
        let width = spec.trunk.output_dim;
        PolicyNetwork {
            trunk: Network::zeros(spec.trunk.clone()),
            policy: DenseLayer::zeros(width, NUM_ACTIONS, Activation::Identity),
            value: DenseLayer::zeros(width, 1, Activation::Identity),
            spec,
        }
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    /// Action logits (or Q-values), state value, and the trace for backward.
    pub fn forward(&self, window: ArrayView2<f64>, extras: &[f64]) -> Result<(Array1<f64>, f64, PolicyTrace)> {
        let (features, trunk) = self.trunk.forward(window, extras)?;
        let policy = self.policy.forward(&features)?;
        let value = self.value.forward(&features)?;
        Ok((
            policy.output.clone(),
            value.output[0],
            PolicyTrace {
                trunk,
                policy,
                value,
            },
        ))
    }

    pub fn logits(&self, obs: &Observation) -> Result<Array1<f64>> {
        self.forward(obs.window.view(), &obs.extras).map(|(l, _, _)| l)
    }

    pub fn greedy(&self, obs: &Observation) -> Result<Position> {
        let logits = self.logits(obs)?;
        Position::from_index(argmax(logits.as_slice().expect("contiguous")))
    }

    pub fn backward(&self, trace: &PolicyTrace, d_logits: &Array1<f64>, d_value: f64) -> Result<PolicyGrads> {
        let (d_feat_p, pw, pb) = self.policy.backward(&trace.policy, d_logits);
        let (d_feat_v, vw, vb) = self.value.backward(&trace.value, &Array1::from_elem(1, d_value));
        let trunk = self.trunk.backward(&trace.trunk, &(d_feat_p + d_feat_v))?.grads;
        Ok(PolicyGrads {
            trunk,
            policy: (pw, pb),
            value: (vw, vb),
        })
    }

    pub fn to_checkpoint(&self, kind: &str) -> Result<Checkpoint> {
        Checkpoint::new(kind, &self.spec, self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = PolicyNetwork::zeros(ckpt.architecture()?);
        ckpt.restore_into(&mut net)?;
        Ok(net)
    }
}

impl PolicyGrads {
    pub fn zeros_like(net: &PolicyNetwork) -> Self {
        let zeros = |l: &DenseLayer| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len()));
        PolicyGrads {
            trunk: NetworkGrads::zeros_like(&net.trunk),
            policy: zeros(&net.policy),
            value: zeros(&net.value),
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyGrads, scale: f64) {
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

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
        n
    }
}

fn head_refs<'a>(prefix: &str, w: &'a Array2<f64>, b: &'a Array1<f64>) -> [ParamRef<'a>; 2] {
    [
        ParamRef {
            name: format!("{prefix}.weight"),
            shape: w.shape().to_vec(),
            data: w.as_slice().expect("contiguous"),
        },
        ParamRef {
            name: format!("{prefix}.bias"),
            shape: vec![b.len()],
            data: b.as_slice().expect("contiguous"),
        },
    ]
}

fn head_muts<'a>(prefix: &str, w: &'a mut Array2<f64>, b: &'a mut Array1<f64>) -> [ParamMut<'a>; 2] {
    [
        (format!("{prefix}.weight"), w.as_slice_mut().expect("contiguous")),
        (format!("{prefix}.bias"), b.as_slice_mut().expect("contiguous")),
    ]
}

fn prefixed<'a>(blocks: Vec<ParamRef<'a>>) -> impl Iterator<Item = ParamRef<'a>> {
    blocks.into_iter().map(|b| ParamRef {
        name: format!("trunk.{}", b.name),
        ..b
    })
}

impl ParamBlocks for PolicyNetwork {
    fn blocks(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<_> = prefixed(self.trunk.blocks()).collect();
        out.extend(head_refs("policy", &self.policy.weights, &self.policy.bias));
        out.extend(head_refs("value", &self.value.weights, &self.value.bias));
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out: Vec<_> = self
            .trunk
            .blocks_mut()
            .into_iter()
            .map(|(n, d)| (format!("trunk.{n}"), d))
            .collect();
        out.extend(head_muts("policy", &mut self.policy.weights, &mut self.policy.bias));
        out.extend(head_muts("value", &mut self.value.weights, &mut self.value.bias));
        out
    }
}

impl ParamBlocks for PolicyGrads {
    fn blocks(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<_> = prefixed(self.trunk.blocks()).collect();
        out.extend(head_refs("policy", &self.policy.0, &self.policy.1));
        out.extend(head_refs("value", &self.value.0, &self.value.1));
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out: Vec<_> = self
            .trunk
            .blocks_mut()
            .into_iter()
            .map(|(n, d)| (format!("trunk.{n}"), d))
            .collect();
        out.extend(head_muts("policy", &mut self.policy.0, &mut self.policy.1));
        out.extend(head_muts("value", &mut self.value.0, &mut self.value.1));
        out
    }
}
