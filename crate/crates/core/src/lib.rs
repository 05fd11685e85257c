//! Mask-aware partial-convolution U-Net for joint surface reconstruction and
//! material classification from a small visible patch.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: NHWC tensors, compute kernels and a reverse-mode autodiff tape.
//! - [`pconv`]: partial convolution with mask propagation, squeeze-and-excitation,
//!   and the mask pooling/merging helpers.
//! - [`model`]: the encoder / dilated bottleneck / decoder network with its RGB
//!   and multi-scale classification heads.
//! - [`loss`] and [`metrics`]: the multi-task objective and the evaluation suite.
//! - [`data`]: central-patch masking, stratified splits, augmentation, class
//!   weights, dataset loading and a synthetic texture generator.
//! - [`train`]: Adam, plateau scheduling, early stopping, the two-phase trainer
//!   and checkpoint files.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pconv;
pub mod tensor;
pub mod train;

pub use error::{Result, SmarcError};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Graph, Real, Tensor, Var};
