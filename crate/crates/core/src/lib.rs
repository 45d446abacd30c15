//! Focus quality assessment with a single strided convolution layer followed
//! by min/max pooling.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: image containers, strided convolution, reductions, resizing.
//! * [`model`]: the N-kernel model, its weight file format and kernel spectra.
//! * [`training`]: hand-written backward pass, losses, Adam and the fold protocol.
//! * [`metrics`]: SRCC, PLCC, ROC-AUC, PR-AUC, binarization and thresholds.
//! * [`data`]: manifests, tile loading, dense crop scoring, synthetic blur data.
//! * [`heatmap`]: dense score lattices and colour overlays.
//! * [`bench`]: timing harness and scanner throughput arithmetic.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{LossKind, ModelParams, SharpnessScore};
pub use tensor::{ImageTensor, ResponseGrid};

/// Side length of the square crops the model is trained and evaluated on.
pub const CROP_SIZE: usize = 235;
/// Spacing between neighbouring crops when densely sampling a tile.
pub const DENSE_STRIDE: usize = 128;
/// Stride of the model's convolution.
pub const CONV_STRIDE: usize = 5;
/// Zero padding applied on every side before the model's convolution.
pub const CONV_PADDING: usize = 1;
/// Kernel side length used by the shipped model presets.
pub const KERNEL_SIZE: usize = 7;
