//! Camera parameterization, rigid-transform algebra, and Plücker rays.
//!
//! Conventions, used everywhere downstream:
//! - quaternions are (w, x, y, z),
//! - extrinsics are world-to-camera: `x_cam = R·x_world + t`,
//! - pixel (u, v) means the pixel *center* (u + 0.5, v + 0.5),
//! - pose tangents are 6-vectors `[ρ; φ]` (translation, rotation) applied as
//!   a left-multiplicative update `T ← exp(ξ)·T`.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::scalar::{sf, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("near-zero quaternion (|q| = {norm:.3e}) cannot be normalized")]
    DegenerateRotation { norm: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pinhole intrinsics, shared by every view of a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<S: Scalar> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub width: u32,
    pub height: u32,
}

impl<S: Scalar> CameraIntrinsics<S> {
    pub fn new(fx: S, fy: S, cx: S, cy: S, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fx > S::zero() && fy > S::zero()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={}, fy={}",
                fx.to_f64(),
                fy.to_f64()
            )));
        }
        let (w, h) = (sf(width as f64), sf(height as f64));
        if !(cx >= S::zero() && cx <= w && cy >= S::zero() && cy <= h) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside image {}x{}",
                cx.to_f64(),
                cy.to_f64(),
                width,
                height
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    pub fn cast<T: Scalar>(&self) -> CameraIntrinsics<T> {
        CameraIntrinsics {
            fx: sf(self.fx.to_f64()),
            fy: sf(self.fy.to_f64()),
            cx: sf(self.cx.to_f64()),
            cy: sf(self.cy.to_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// World-to-camera rigid transform. The quaternion is kept unit-norm; any
/// constructor or update renormalizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<S: Scalar> {
    quat: Vector4<S>,
    pub trans: Vector3<S>,
}

/// Relative poses and gauge transforms share the representation.
pub type RigidTransform<S> = CameraPose<S>;

impl<S: Scalar> CameraPose<S> {
    pub fn identity() -> Self {
        Self { quat: Vector4::new(S::one(), S::zero(), S::zero(), S::zero()), trans: Vector3::zeros() }
    }

    pub fn new(quat: Vector4<S>, trans: Vector3<S>) -> Result<Self, GeometryError> {
        let n = quat.norm();
        if n.to_f64() <= 1e-12 {
            return Err(GeometryError::DegenerateRotation { norm: n.to_f64() });
        }
        Ok(Self { quat: quat / n, trans })
    }

    /// Unit quaternion (w, x, y, z).
    pub fn quat(&self) -> Vector4<S> {
        self.quat
    }

    pub fn rotation(&self) -> Matrix3<S> {
        unit_quat_to_rot(&self.quat)
    }

    pub fn transform_point(&self, p: &Vector3<S>) -> Vector3<S> {
        self.rotation() * p + self.trans
    }

    /// Camera center in world frame, −Rᵀt.
    pub fn center(&self) -> Vector3<S> {
        -(self.rotation().transpose() * self.trans)
    }

    pub fn inverse(&self) -> Self {
        let qc = quat_conjugate(&self.quat);
        let rt = unit_quat_to_rot(&qc);
        Self { quat: qc, trans: -(rt * self.trans) }
    }

    /// `self ∘ rhs`: applies `rhs` first, then `self`.
    pub fn compose(&self, rhs: &Self) -> Self {
        let q = normalize_quat(&quat_mul(&self.quat, &rhs.quat));
        let t = self.rotation() * rhs.trans + self.trans;
        Self { quat: q, trans: t }
    }

    /// Left-multiplicative tangent update `exp(ξ)·self`.
    pub fn retract(&self, xi: &[S; 6]) -> Self {
        exp_se3(xi).compose(self)
    }

    pub fn cast<T: Scalar>(&self) -> CameraPose<T> {
        CameraPose {
            quat: self.quat.map(|v| sf(v.to_f64())),
            trans: self.trans.map(|v| sf(v.to_f64())),
        }
    }
}

fn quat_mul<S: Scalar>(a: &Vector4<S>, b: &Vector4<S>) -> Vector4<S> {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

fn quat_conjugate<S: Scalar>(q: &Vector4<S>) -> Vector4<S> {
    Vector4::new(q[0], -q[1], -q[2], -q[3])
}

fn normalize_quat<S: Scalar>(q: &Vector4<S>) -> Vector4<S> {
    *q / q.norm()
}

/// Rotation matrix of an already-unit quaternion.
fn unit_quat_to_rot<S: Scalar>(q: &Vector4<S>) -> Matrix3<S> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = sf::<S>(2.0);
    Matrix3::new(
        S::one() - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        S::one() - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        S::one() - two * (x * x + y * y),
    )
}

/// Rotation matrix of a possibly unnormalized quaternion (w, x, y, z).
pub fn quat_to_rot<S: Scalar>(q: &Vector4<S>) -> Result<Matrix3<S>, GeometryError> {
    let n = q.norm();
    if n.to_f64() <= 1e-12 {
        return Err(GeometryError::DegenerateRotation { norm: n.to_f64() });
    }
    Ok(unit_quat_to_rot(&(*q / n)))
}

/// Quaternion (w, x, y, z) of a rotation matrix. Branches on the largest
/// diagonal term for stability; the sign is fixed to w ≥ 0.
pub fn rot_to_quat<S: Scalar>(r: &Matrix3<S>) -> Vector4<S> {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > S::zero() {
        let s = (trace + S::one()).sqrt() * sf(2.0);
        Vector4::new(
            s * sf(0.25),
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (S::one() + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * sf(2.0);
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            s * sf(0.25),
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (S::one() + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * sf(2.0);
        Vector4::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            s * sf(0.25),
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (S::one() + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * sf(2.0);
        Vector4::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            s * sf(0.25),
        )
    };
    let q = normalize_quat(&q);
    if q[0] < S::zero() {
        -q
    } else {
        q
    }
}

/// `T_ab = T_b ∘ T_a⁻¹`: maps camera-a coordinates to camera-b coordinates.
pub fn relative_pose<S: Scalar>(a: &CameraPose<S>, b: &CameraPose<S>) -> RigidTransform<S> {
    b.compose(&a.inverse())
}

pub fn skew<S: Scalar>(v: &Vector3<S>) -> Matrix3<S> {
    Matrix3::new(S::zero(), -v[2], v[1], v[2], S::zero(), -v[0], v[1], v[0], S::zero())
}

/// SE(3) exponential of ξ = [ρ; φ] (translation, rotation).
pub fn exp_se3<S: Scalar>(xi: &[S; 6]) -> RigidTransform<S> {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    let theta = phi.norm();
    let th = theta.to_f64();

    // q = (cos(θ/2), sin(θ/2)·φ/θ), Taylor for sin(θ/2)/θ near zero.
    let half: S = sf(0.5);
    let (w, sc) = if th < 1e-6 {
        let t2 = theta * theta;
        (S::one() - t2 * sf(0.125), half - t2 / sf(48.0))
    } else {
        ((theta * half).cos(), (theta * half).sin() / theta)
    };
    let quat = Vector4::new(w, sc * phi[0], sc * phi[1], sc * phi[2]);

    // t = V(φ)ρ, V = I + a·[φ]× + b·[φ]×², a = (1−cosθ)/θ², b = (θ−sinθ)/θ³.
    let (a, b) = if th < 1e-6 {
        let t2 = theta * theta;
        (half - t2 / sf::<S>(24.0), sf::<S>(1.0 / 6.0) - t2 / sf::<S>(120.0))
    } else {
        ((S::one() - theta.cos()) / (theta * theta), (theta - theta.sin()) / (theta * theta * theta))
    };
    let px = skew(&phi);
    let v = Matrix3::identity() + px * a + px * px * b;

    CameraPose { quat: normalize_quat(&quat), trans: v * rho }
}

/// Geodesic angle in radians between the rotations of two unit quaternions.
pub fn quat_angle<S: Scalar>(a: &Vector4<S>, b: &Vector4<S>) -> S {
    let rel = quat_mul(a, &quat_conjugate(b));
    let vec = Vector3::new(rel[1], rel[2], rel[3]).norm();
    // atan2 form is accurate for both tiny and near-π angles.
    let ang = sf::<S>(2.0) * vec.atan2(rel[0].abs());
    ang
}

/// Ray through the center of pixel (u, v): origin = camera center, direction
/// = Rᵀ·normalize((u+0.5−cx)/fx, (v+0.5−cy)/fy, 1).
pub fn pixel_ray<S: Scalar>(
    k: &CameraIntrinsics<S>,
    pose: &CameraPose<S>,
    u: u32,
    v: u32,
) -> (Vector3<S>, Vector3<S>) {
    let half = sf::<S>(0.5);
    let px = sf::<S>(u as f64) + half;
    let py = sf::<S>(v as f64) + half;
    let cam = Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, S::one());
    let dir = pose.rotation().transpose() * cam.normalize();
    (pose.center(), dir)
}

/// Per-pixel ray directions and moments (m = origin × d), row-major.
#[derive(Debug, Clone)]
pub struct PluckerRayMap<S: Scalar> {
    pub width: u32,
    pub height: u32,
    pub dirs: Vec<Vector3<S>>,
    pub moments: Vec<Vector3<S>>,
}

impl<S: Scalar> PluckerRayMap<S> {
    pub fn at(&self, u: u32, v: u32) -> (Vector3<S>, Vector3<S>) {
        let i = (v * self.width + u) as usize;
        (self.dirs[i], self.moments[i])
    }
}

/// Plücker map of (K, T). Pure function of its inputs; recomputed per
/// optimization step because K and T are optimization variables.
pub fn plucker_map<S: Scalar>(k: &CameraIntrinsics<S>, pose: &CameraPose<S>) -> PluckerRayMap<S> {
    let n = (k.width * k.height) as usize;
    let mut dirs = Vec::with_capacity(n);
    let mut moments = Vec::with_capacity(n);
    let origin = pose.center();
    let rt = pose.rotation().transpose();
    let half = sf::<S>(0.5);
    for v in 0..k.height {
        for u in 0..k.width {
            let px = sf::<S>(u as f64) + half;
            let py = sf::<S>(v as f64) + half;
            let cam = Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, S::one());
            let d = rt * cam.normalize();
            dirs.push(d);
            moments.push(origin.cross(&d));
        }
    }
    PluckerRayMap { width: k.width, height: k.height, dirs, moments }
}

/// JSON schema for intrinsics: {"fx","fy","cx","cy","width","height"}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrinsicsJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl IntrinsicsJson {
    pub fn from_intrinsics<S: Scalar>(k: &CameraIntrinsics<S>) -> Self {
        Self {
            fx: k.fx.to_f64(),
            fy: k.fy.to_f64(),
            cx: k.cx.to_f64(),
            cy: k.cy.to_f64(),
            width: k.width,
            height: k.height,
        }
    }

    pub fn to_intrinsics<S: Scalar>(&self) -> Result<CameraIntrinsics<S>, GeometryError> {
        CameraIntrinsics::new(
            sf(self.fx),
            sf(self.fy),
            sf(self.cx),
            sf(self.cy),
            self.width,
            self.height,
        )
    }
}

/// JSON schema for a pose: {"quat":[w,x,y,z],"trans":[x,y,z]}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

impl PoseJson {
    pub fn from_pose<S: Scalar>(p: &CameraPose<S>) -> Self {
        let q = p.quat();
        Self {
            quat: [q[0].to_f64(), q[1].to_f64(), q[2].to_f64(), q[3].to_f64()],
            trans: [p.trans[0].to_f64(), p.trans[1].to_f64(), p.trans[2].to_f64()],
        }
    }

    pub fn to_pose<S: Scalar>(&self) -> Result<CameraPose<S>, GeometryError> {
        CameraPose::new(
            Vector4::new(
                sf(self.quat[0]),
                sf(self.quat[1]),
                sf(self.quat[2]),
                sf(self.quat[3]),
            ),
            Vector3::new(
                sf(self.trans[0]),
                sf(self.trans[1]),
                sf(self.trans[2]),
            ),
        )
    }
}
