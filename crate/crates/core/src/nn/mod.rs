//! Minimal differentiable building blocks with hand-written gradients.

mod checkpoint;
mod layers;
mod loss;
mod network;
mod optim;

pub use checkpoint::{Checkpoint, TensorBlock, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{Activation, DenseLayer, DenseTrace};
pub use loss::{
    cross_entropy, entropy, kl_divergence, softmax, softmax_cross_entropy_grad,
    softmax_with_temperature, PROB_FLOOR,
};
pub use network::{
    AdaptiveNormSpec, Network, NetworkBackward, NetworkGrads, NetworkSpec, NetworkTrace,
};
pub use optim::{Adam, AdamConfig};

/// Read-only view of a named parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub type ParamMut<'a> = (String, &'a mut [f64]);

/// Anything exposing its parameters as flat named blocks in a fixed order.
/// Gradient containers use the same names and order as their parameters.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<ParamRef<'_>>;
    fn blocks_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }
}
