//! World-space covariance construction and EWA projection to the image plane.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::{RenderOptions, SplatError};
use crate::geometry::{quat_to_rot, CameraIntrinsics, CameraPose};
use crate::scalar::Scalar;

/// Σ = R(q)·diag(scale²)·R(q)ᵀ. `scale` holds per-axis standard deviations
/// (already activated, all positive); `q` may be unnormalized.
pub fn build_covariance<S: Scalar>(
    q: &Vector4<S>,
    scale: &Vector3<S>,
) -> Result<Matrix3<S>, SplatError> {
    let rot = quat_to_rot(q).map_err(|_| SplatError::DegenerateRotation { index: usize::MAX })?;
    Ok(covariance_from_rot(&rot, scale))
}

pub(crate) fn covariance_from_rot<S: Scalar>(rot: &Matrix3<S>, scale: &Vector3<S>) -> Matrix3<S> {
    let d = Matrix3::from_diagonal(&scale.map(|s| s * s));
    rot * d * rot.transpose()
}

/// Screen-space footprint of one Gaussian under a pinhole camera.
#[derive(Debug, Clone)]
pub struct Projection<S: Scalar> {
    pub mean_cam: Vector3<S>,
    pub mean2d: Vector2<S>,
    /// J·W·Σ·Wᵀ·Jᵀ + κI.
    pub cov2d: Matrix2<S>,
    /// Camera-frame z of the mean.
    pub depth: S,
    /// Perspective Jacobian at the camera-frame mean.
    pub jac: Matrix2x3<S>,
}

/// Projects mean and covariance into the image. Returns `None` when the mean
/// lies at or behind the near plane (culled, not an error).
pub fn project_gaussian<S: Scalar>(
    k: &CameraIntrinsics<S>,
    pose: &CameraPose<S>,
    mean: &Vector3<S>,
    cov: &Matrix3<S>,
    opts: &RenderOptions<S>,
) -> Option<Projection<S>> {
    let w = pose.rotation();
    let mean_cam = w * mean + pose.trans;
    let z = mean_cam[2];
    if z <= opts.near {
        return None;
    }
    let (x, y) = (mean_cam[0], mean_cam[1]);
    let inv_z = S::one() / z;
    let mean2d = Vector2::new(k.fx * x * inv_z + k.cx, k.fy * y * inv_z + k.cy);
    let jac = Matrix2x3::new(
        k.fx * inv_z,
        S::zero(),
        -k.fx * x * inv_z * inv_z,
        S::zero(),
        k.fy * inv_z,
        -k.fy * y * inv_z * inv_z,
    );
    let m = jac * w;
    let mut cov2d = m * cov * m.transpose();
    cov2d[(0, 0)] += opts.kappa;
    cov2d[(1, 1)] += opts.kappa;
    Some(Projection { mean_cam, mean2d, cov2d, depth: z, jac })
}
