//! Minimal differentiable-model substrate.

pub mod gradcheck;
mod layers;
mod loss;
mod model;
pub mod objective;
pub mod optim;

pub use layers::{Activation, Dense, EncryptorParams, StochasticLayer};
pub use loss::{cross_entropy, kl_divergence, LOG_EPS};
pub use model::{argmax, forward_plain, forward_stochastic, softmax, LayerSizes, SegmentedParams};
pub use objective::{fedprox_penalty, gradient, loss, HardBatch, LossSpec, Proximal, SoftBatch};
pub use optim::{OptimizerKind, OptimizerState};

use crate::tensor::Tensor;

/// Gradients in the same tensor order as [`ParamCollection::tensors`].
pub type Gradients = Vec<Tensor>;

/// A set of trainable tensors with a fixed order.
pub trait ParamCollection {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors()
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }
}

impl ParamCollection for Vec<Tensor> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}
