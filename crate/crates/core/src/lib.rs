//! Self-calibrating differentiable Gaussian splatting on the CPU.
//!
//! The pipeline fits a set of pixel-anchored 3D Gaussians, the camera poses of
//! every view, and one shared set of intrinsics directly against photometric
//! error, with analytic gradients end to end. Windows of views are drawn from
//! a sequence by a visual-overlap curriculum; synthetic scenes with exact
//! ground truth back the evaluation metrics.

pub mod curriculum;
pub mod evalmetrics;
pub mod geometry;
pub mod photometric;
pub mod scalar;
pub mod selfcal;
pub mod splat;
pub mod synthscene;

pub use scalar::Scalar;
