//! Static normalization baselines and the learnable adaptive input
//! normalization layer.
//!
//! The adaptive layer maps an `L × d` window `x` to
//!
//! ```text
//! s_a   = mean_i x_i                  a     = W_a s_a + b_a
//! x'    = x - a                       s_b   = sqrt(mean_i x'_i^2)
//! beta  = 1 / (W_b s_b + b_b)         x''   = x' * beta
//! s_g   = mean_i x''_i                gamma = sigmoid(W_g s_g + b_g)
//! out   = x'' * gamma   (or x'' with the gate disabled)
//! ```
//!
//! with all products taken per column.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::FeatureWindow;

/// Magnitude floor applied to the scale denominator before inversion.
pub const SCALE_EPSILON: f64 = 1e-8;

/// Variance guard for instance normalization.
pub const INSTANCE_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticNormKind {
    ZscoreDataset,
    MinmaxDataset,
    SampleAverage,
    SampleStandardization,
    InstanceNormalization,
}

impl StaticNormKind {
    pub fn needs_dataset_stats(self) -> bool {
        matches!(
            self,
            StaticNormKind::ZscoreDataset | StaticNormKind::MinmaxDataset
        )
    }
}

/// Per-column statistics of the training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl DatasetStats {
    /// Fits over every row of every window. Call with training windows only.
    pub fn fit(windows: &[FeatureWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Empty("cannot fit statistics on zero windows".into()))?;
        let d = first.cols();
        if let Some(w) = windows.iter().find(|w| w.cols() != d) {
            return Err(Error::Shape(format!(
                "window has {} columns, expected {d}",
                w.cols()
            )));
        }
        Ok(Self::fit_rows(d, || windows.iter().flat_map(|w| w.matrix.rows())))
    }

    /// Fits over the rows of a single feature matrix.
    pub fn fit_matrix(features: ArrayView2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("cannot fit statistics on zero rows".into()));
        }
        Ok(Self::fit_rows(features.ncols(), || features.rows().into_iter()))
    }

    fn fit_rows<'a, I>(d: usize, rows: impl Fn() -> I) -> Self
    where
        I: Iterator<Item = ndarray::ArrayView1<'a, f64>>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in rows() {
            n += 1;
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; d];
        for row in rows() {
            for (j, &v) in row.iter().enumerate() {
                sq[j] += (v - mean[j]).powi(2);
            }
        }
        let std = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
        DatasetStats {
            mean,
            std,
            min,
            max,
        }
    }

    /// Column-wise z-score of `features` with these statistics; constant
    /// columns map to zero.
    pub fn zscore(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "matrix has {} columns, statistics have {}",
                features.ncols(),
                self.mean.len()
            )));
        }
        let mut out = features.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let inv = guarded_inverse(self.std[j]);
            col.mapv_inplace(|v| (v - self.mean[j]) * inv);
        }
        Ok(out)
    }
}

/// Column mean computed as `x_0 + mean(x_i - x_0)`, exact for constant columns.
fn column_means(x: ArrayView2<f64>) -> Array1<f64> {
    let l = x.nrows() as f64;
    let first = x.row(0).to_owned();
    let mut acc = Array1::zeros(x.ncols());
    for row in x.rows() {
        acc += &(&row - &first);
    }
    first + acc / l
}

fn guarded_inverse(scale: f64) -> f64 {
    if scale > SCALE_EPSILON {
        1.0 / scale
    } else {
        0.0
    }
}

pub fn static_normalize(
    window: &FeatureWindow,
    kind: StaticNormKind,
    stats: Option<&DatasetStats>,
) -> Result<FeatureWindow> {
    let x = window.matrix.view();
    let d = x.ncols();
    let mut out = x.to_owned();
    let dataset = |stats: Option<&DatasetStats>| -> Result<DatasetStats> {
        let s = stats.ok_or_else(|| {
            Error::Config(format!("{kind:?} needs statistics fitted on training data"))
        })?;
        if s.mean.len() != d {
            return Err(Error::Shape(format!(
                "statistics have {} columns, window has {d}",
                s.mean.len()
            )));
        }
        Ok(s.clone())
    };
    match kind {
        StaticNormKind::ZscoreDataset => {
            let s = dataset(stats)?;
            for (j, mut c) in out.columns_mut().into_iter().enumerate() {
                let inv = guarded_inverse(s.std[j]);
                let m = s.mean[j];
                c.mapv_inplace(|v| (v - m) * inv);
            }
        }
        StaticNormKind::MinmaxDataset => {
            let s = dataset(stats)?;
            for (j, mut c) in out.columns_mut().into_iter().enumerate() {
                let inv = guarded_inverse(s.max[j] - s.min[j]);
                let lo = s.min[j];
                c.mapv_inplace(|v| (v - lo) * inv);
            }
        }
        StaticNormKind::SampleAverage => {
            let means = column_means(x);
            out -= &means;
        }
        StaticNormKind::SampleStandardization => {
            let means = column_means(x);
            out -= &means;
            for mut c in out.columns_mut() {
                let sd = (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt();
                let inv = guarded_inverse(sd);
                c.mapv_inplace(|v| v * inv);
            }
        }
        StaticNormKind::InstanceNormalization => {
            let means = column_means(x);
            out -= &means;
            for mut c in out.columns_mut() {
                let var = c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64;
                let inv = 1.0 / (var + INSTANCE_EPSILON).sqrt();
                c.mapv_inplace(|v| v * inv);
            }
        }
    }
    Ok(FeatureWindow {
        matrix: out,
        timestamps: window.timestamps.clone(),
        end_timestamp: window.end_timestamp,
        target_index: window.target_index,
    })
}

/// Learnable shift (`alpha`), scale (`beta`) and gate (`gamma`) blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveNormParams {
    pub w_alpha: Array2<f64>,
    pub b_alpha: Array1<f64>,
    pub w_beta: Array2<f64>,
    pub b_beta: Array1<f64>,
    pub w_gamma: Array2<f64>,
    pub b_gamma: Array1<f64>,
    pub epsilon: f64,
}

impl AdaptiveNormParams {
    /// Identity shift and scale, zero gate: starts out as instance
    /// normalization with every gate at 0.5.
    pub fn identity(d: usize) -> Self {
        AdaptiveNormParams {
            w_alpha: Array2::eye(d),
            b_alpha: Array1::zeros(d),
            w_beta: Array2::eye(d),
            b_beta: Array1::zeros(d),
            w_gamma: Array2::zeros((d, d)),
            b_gamma: Array1::zeros(d),
            epsilon: SCALE_EPSILON,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        AdaptiveNormParams {
            w_alpha: Array2::zeros((d, d)),
            b_alpha: Array1::zeros(d),
            w_beta: Array2::zeros((d, d)),
            b_beta: Array1::zeros(d),
            w_gamma: Array2::zeros((d, d)),
            b_gamma: Array1::zeros(d),
            epsilon: self.epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.b_alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let square = [&self.w_alpha, &self.w_beta, &self.w_gamma];
        if square.iter().any(|w| w.dim() != (d, d))
            || self.b_beta.len() != d
            || self.b_gamma.len() != d
        {
            return Err(Error::Shape(format!(
                "adaptive normalization blocks must be {d}x{d} and {d}"
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Domain("epsilon must be positive".into()));
        }
        let finite = square
            .iter()
            .all(|w| w.iter().all(|v| v.is_finite()))
            && [&self.b_alpha, &self.b_beta, &self.b_gamma]
                .iter()
                .all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Domain("non-finite adaptive normalization parameter".into()));
        }
        Ok(())
    }

    /// `(name, values)` for every block, in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w_alpha", self.w_alpha.as_slice().expect("contiguous")),
            ("b_alpha", self.b_alpha.as_slice().expect("contiguous")),
            ("w_beta", self.w_beta.as_slice().expect("contiguous")),
            ("b_beta", self.b_beta.as_slice().expect("contiguous")),
            ("w_gamma", self.w_gamma.as_slice().expect("contiguous")),
            ("b_gamma", self.b_gamma.as_slice().expect("contiguous")),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w_alpha", self.w_alpha.as_slice_mut().expect("contiguous")),
            ("b_alpha", self.b_alpha.as_slice_mut().expect("contiguous")),
            ("w_beta", self.w_beta.as_slice_mut().expect("contiguous")),
            ("b_beta", self.b_beta.as_slice_mut().expect("contiguous")),
            ("w_gamma", self.w_gamma.as_slice_mut().expect("contiguous")),
            ("b_gamma", self.b_gamma.as_slice_mut().expect("contiguous")),
        ]
    }
}

/// Learning-rate multipliers for the three adaptive sub-layers, applied on
/// top of the optimizer's base rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormLrMultipliers {
    pub shift: f64,
    pub scale: f64,
    pub gate: f64,
}

impl Default for NormLrMultipliers {
    fn default() -> Self {
        NormLrMultipliers {
            shift: 1e-4,
            scale: 1e-4,
            gate: 1e-3,
        }
    }
}

impl NormLrMultipliers {
    pub fn apply(&self, adam: crate::nn::Adam) -> crate::nn::Adam {
        adam.with_multiplier("norm.w_alpha", self.shift)
            .with_multiplier("norm.b_alpha", self.shift)
            .with_multiplier("norm.w_beta", self.scale)
            .with_multiplier("norm.b_beta", self.scale)
            .with_multiplier("norm.w_gamma", self.gate)
            .with_multiplier("norm.b_gamma", self.gate)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormForwardTrace {
    pub input: Array2<f64>,
    pub s_alpha: Array1<f64>,
    pub alpha: Array1<f64>,
    /// `x - alpha`
    pub shifted: Array2<f64>,
    pub s_beta: Array1<f64>,
    /// `W_b s_b + b_b` after clamping.
    pub scale_denominator: Array1<f64>,
    /// Entries whose denominator was clamped to `±epsilon`.
    pub clamped: Vec<bool>,
    pub beta: Array1<f64>,
    /// `(x - alpha) * beta`
    pub scaled: Array2<f64>,
    pub s_gamma: Array1<f64>,
    pub gamma: Array1<f64>,
    pub use_gate: bool,
    pub output: Array2<f64>,
}

pub fn adaptive_forward(
    x: ArrayView2<f64>,
    params: &AdaptiveNormParams,
    use_gate: bool,
) -> Result<NormForwardTrace> {
    let (l, d) = x.dim();
    if d != params.dim() {
        return Err(Error::Shape(format!(
            "window has {d} columns, normalization layer expects {}",
            params.dim()
        )));
    }
    if l == 0 {
        return Err(Error::Empty("window has no rows".into()));
    }
    let s_alpha = column_means(x);
    let alpha = params.w_alpha.dot(&s_alpha) + &params.b_alpha;
    let shifted = &x - &alpha;
    let s_beta = shifted
        .map_axis(Axis(0), |c| (c.iter().map(|v| v * v).sum::<f64>() / l as f64).sqrt());
    let raw = params.w_beta.dot(&s_beta) + &params.b_beta;
    let eps = params.epsilon;
    let clamped: Vec<bool> = raw.iter().map(|u| u.abs() < eps).collect();
    let scale_denominator = raw.mapv(|u| {
        if u.abs() < eps {
            if u < 0.0 {
                -eps
            } else {
                eps
            }
        } else {
            u
        }
    });
    let beta = scale_denominator.mapv(|u| 1.0 / u);
    let scaled = &shifted * &beta;
    let s_gamma = scaled.mean_axis(Axis(0)).expect("non-empty window");
    let gamma = (params.w_gamma.dot(&s_gamma) + &params.b_gamma).mapv(sigmoid);
    let output = if use_gate {
        &scaled * &gamma
    } else {
        scaled.clone()
    };
    Ok(NormForwardTrace {
        input: x.to_owned(),
        s_alpha,
        alpha,
        shifted,
        s_beta,
        scale_denominator,
        clamped,
        beta,
        scaled,
        s_gamma,
        gamma,
        use_gate,
        output,
    })
}

/// Forward pass on a window, returning the normalized window and the trace.
pub fn adaptive_normalize(
    window: &FeatureWindow,
    params: &AdaptiveNormParams,
    use_gate: bool,
) -> Result<(FeatureWindow, NormForwardTrace)> {
    let trace = adaptive_forward(window.matrix.view(), params, use_gate)?;
    let out = FeatureWindow {
        matrix: trace.output.clone(),
        timestamps: window.timestamps.clone(),
        end_timestamp: window.end_timestamp,
        target_index: window.target_index,
    };
    Ok((out, trace))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients of a scalar loss through one adaptive forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBackward {
    pub input: Array2<f64>,
    /// Parameter gradients with the same block layout as the parameters.
    pub params: AdaptiveNormParams,
}

pub fn adaptive_backward(
    trace: &NormForwardTrace,
    params: &AdaptiveNormParams,
    upstream: ArrayView2<f64>,
) -> Result<NormBackward> {
    let (l, d) = trace.shifted.dim();
    if upstream.dim() != (l, d) {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, expected {:?}",
            upstream.dim(),
            (l, d)
        )));
    }
    if params.dim() != d {
        return Err(Error::Shape("parameters do not match trace".into()));
    }
    let lf = l as f64;
    let mut grads = params.zeros_like();

    // gate
    let mut d_scaled = if trace.use_gate {
        let d_scaled = &upstream * &trace.gamma;
        let d_gamma = (&upstream * &trace.scaled).sum_axis(Axis(0));
        let d_v = &d_gamma * &trace.gamma.mapv(|g| g * (1.0 - g));
        grads.w_gamma = outer(&d_v, &trace.s_gamma);
        grads.b_gamma = d_v.clone();
        let d_s_gamma = params.w_gamma.t().dot(&d_v);
        d_scaled + &(d_s_gamma / lf)
    } else {
        upstream.to_owned()
    };

    // scale
    let d_beta = (&d_scaled * &trace.shifted).sum_axis(Axis(0));
    let d_u = Array1::from_iter((0..d).map(|j| {
        if trace.clamped[j] {
            0.0
        } else {
            -d_beta[j] * trace.beta[j] * trace.beta[j]
        }
    }));
    grads.w_beta = outer(&d_u, &trace.s_beta);
    grads.b_beta = d_u.clone();
    let d_s_beta = params.w_beta.t().dot(&d_u);
    d_scaled *= &trace.beta;
    let mut d_shifted = d_scaled;
    for j in 0..d {
        let sb = trace.s_beta[j];
        if sb > 0.0 {
            let k = d_s_beta[j] / (lf * sb);
            for i in 0..l {
                d_shifted[[i, j]] += k * trace.shifted[[i, j]];
            }
        }
    }

    // shift
    let d_alpha = -d_shifted.sum_axis(Axis(0));
    grads.w_alpha = outer(&d_alpha, &trace.s_alpha);
    grads.b_alpha = d_alpha.clone();
    let d_s_alpha = params.w_alpha.t().dot(&d_alpha);
    let d_input = d_shifted + &(d_s_alpha / lf);

    Ok(NormBackward {
        input: d_input,
        params: grads,
    })
}

pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}
