//! Hierarchical convolutional MLP vision backbones.
//!
//! The crate is `no_std` (it only needs `alloc`) and carries everything that
//! is pure computation: the dense [`Tensor`] type and its kernels, layers with
//! hand-written backward passes, the model family with its presets, analytic
//! parameter/MAC accounting, and a small training stack. File formats, the
//! CLI and anything else that touches the filesystem live in the `convmlp`
//! crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod check;
mod error;
pub mod kernels;
pub mod model;
pub mod nn;
mod real;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{FeaturePyramid, Model, ModelConfig, TokenizerKind, PRESET_NAMES};
pub use nn::{Mode, ParamRegistry};
pub use real::{DType, Real};
pub use tensor::{shape_string, Tensor, MAX_RANK};
