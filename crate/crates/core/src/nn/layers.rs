use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative given the pre-activation and activated value.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `act(W x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// Values cached by [`DenseLayer::forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrace {
    pub input: Array1<f64>,
    pub pre: Array1<f64>,
    pub output: Array1<f64>,
}

impl DenseLayer {
    /// Uniform init: He bound for relu, Glorot bound otherwise. Bias starts at zero.
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            _ => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        DenseLayer {
            weights: Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn forward(&self, input: &Array1<f64>) -> Result<DenseTrace> {
        if input.len() != self.inputs() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.inputs(),
                input.len()
            )));
        }
        let pre = self.weights.dot(input) + &self.bias;
        let output = pre.mapv(|v| self.activation.apply(v));
        Ok(DenseTrace {
            input: input.clone(),
            pre,
            output,
        })
    }

    /// Returns `(d_input, d_weights, d_bias)` for an upstream gradient on the output.
    pub fn backward(
        &self,
        trace: &DenseTrace,
        d_output: &Array1<f64>,
    ) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
        let d_pre = Array1::from_iter(
            d_output
                .iter()
                .zip(trace.pre.iter().zip(trace.output.iter()))
                .map(|(g, (&pre, &post))| g * self.activation.derivative(pre, post)),
        );
        let d_weights = crate::normalization::outer(&d_pre, &trace.input);
        let d_input = self.weights.t().dot(&d_pre);
        (d_input, d_weights, d_pre)
    }
}
