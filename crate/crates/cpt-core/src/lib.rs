//! Convolutional point transformer for 3D point clouds.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] / [`tape`] — a dense n-d array type and a reverse-mode
//!   autodiff tape over it, with the op set the model needs (batched matmul,
//!   grouped 1-d convolution, softmax, layer norm, reductions, gather).
//! * [`graph`] — exact k-nearest-neighbour graph construction (brute force
//!   and a result-identical kd-tree path) plus differentiable edge features.
//! * [`layers`] — the point embedding, convolutional Q/K/V projections,
//!   scaled dot-product attention and the full transformer layer.
//! * [`model`] — configuration, parameter initialization, the classification
//!   and segmentation forward passes, and binary checkpointing.
//! * [`train`] — SGD with momentum, cosine learning-rate schedule,
//!   cross-entropy, augmentation, metrics and the ablation harness.
//! * [`data`] — synthetic shape-surface datasets and the on-disk point,
//!   label and manifest formats.
//!
//! Element type is generic: `f64` is the default for training and for every
//! gradient check, `f32` trades precision for speed.

pub mod config;
pub mod data;
pub mod elem;
pub mod error;
pub mod graph;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use elem::{Dtype, Elem};
pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
