//! Few-shot segmentation with hierarchical correlation matching, built on a
//! self-contained reverse-mode tensor core.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`). All verification and the default CLI path run in `f64`;
//! `f32` is available for faster training where finite-difference headroom
//! is not needed.
//!
//! Module map:
//! - [`tensor`] / [`tape`]: dense tensors, recorded ops, gradients, and the
//!   finite-difference checking harness.
//! - [`pyramid`]: fixed random encoder and the self-attention feature pyramid.
//! - [`matching`]: cosine correlation maps, inverse softmax, prior mask, and
//!   the matching output (plus the cross-attention baseline).
//! - [`distill`]: correlation-map reduction, temperature softmax, and the
//!   inter-stage KL distillation loss.
//! - [`decoder`]: coarse-to-fine fusion and the classification head.
//! - [`model`]: parameter container, forward pass, training loop, metrics
//!   logging, and the checkpoint format.
//! - [`episodes`]: procedural multi-class scenes, episode sampling, folds,
//!   and the mIoU / FB-IoU metrics.
//! - [`pnm`]: binary PPM/PGM writers for episode dumps and heatmaps.

pub mod decoder;
pub mod distill;
pub mod episodes;
pub mod gradcheck;
pub mod matching;
pub mod model;
pub mod pnm;
pub mod pyramid;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::Scalar;
pub use tape::{GradCheckReport, Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};

/// Double-precision aliases: the verification and CLI default.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Episode64 = episodes::Episode<f64>;
pub type Model64 = model::ModelState<f64>;

/// Single-precision aliases for speed-over-headroom training runs.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type Episode32 = episodes::Episode<f32>;
pub type Model32 = model::ModelState<f32>;
