//! Meta-learned per-pixel weighting of a source-domain segmentation loss.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: explicit-graph reverse-mode engine with double backward.
//! * [`nn`]: segmentation network with per-domain heads, U-Net weighting
//!   network, Adam, checkpoints.
//! * [`losses`]: one-hot encoding and (pixel-weighted) cross-entropy.
//! * [`data`]: synthetic two-domain dataset generator and loader.
//! * [`meta`]: joint pretraining, meta step, weighted step and the outer
//!   schedule.
//! * [`eval`]: confusion matrices, IoU, weight-map export.
//! * [`gradcheck`]: finite-difference oracle for gradients and meta-gradients.

pub mod autodiff;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod meta;
pub mod nn;
pub mod tensor;

pub use autodiff::{differentiable_step, AutodiffError, GradOptions, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
