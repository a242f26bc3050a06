//! Layers with explicit backward passes, and the flat parameter registry
//! they read their weights from.
//!
//! A layer never owns its weights. It holds [`ParamId`]s into a
//! [`ParamRegistry`], which keeps every learnable tensor, its gradient
//! accumulator and the non-learnable buffers (batch-norm running
//! statistics) in construction order.

mod layers;
mod mlp;
mod registry;

pub use layers::{BatchNorm2d, Conv2d, Gelu, LayerNorm, Linear, MaxPool2d, Relu, BN_MOMENTUM, NORM_EPS};
pub use mlp::{dropout, ChannelMlp, Dropout, Residual};
pub use registry::{Param, ParamId, ParamInit, ParamRegistry, ParamRole, INIT_STD};

use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub trait Layer<T: Real> {
    /// Evaluation-mode forward. Pure: touches neither the registry nor the layer.
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Training-mode forward. Caches what [`Layer::backward`] needs and may
    /// update buffers (running statistics) or advance dropout state.
    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Accumulates parameter gradients into the registry and returns the
    /// gradient with respect to the input of the last training forward.
    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn run(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(params, x),
            Mode::Eval => self.forward(params, x),
        }
    }
}

/// FNV-1a, used to derive per-layer dropout streams from layer names.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Sequential composition.
impl<T: Real, L: Layer<T>> Layer<T> for alloc::vec::Vec<L> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in self {
            h = layer.forward(params, &h)?;
        }
        Ok(h)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in self.iter_mut() {
            h = layer.forward_train(params, &h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for layer in self.iter_mut().rev() {
            g = layer.backward(params, &g)?;
        }
        Ok(g)
    }
}
