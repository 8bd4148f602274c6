//! Real spherical-harmonic basis through degree 3.
//!
//! Basis polynomials and signs follow the convention common to Gaussian
//! splatting renderers; colors are `clamp(Σ c_lm·Y_lm(dir), 0, 1)` with no
//! DC offset.

use nalgebra::Vector3;

use super::SplatError;
use crate::scalar::{sf, Scalar};

/// Y00 = 1/(2√π).
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_92;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub fn basis_len(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// Basis values Y_lm(dir) for l ≤ degree. `dir` must be unit length.
pub fn sh_basis<S: Scalar>(degree: u32, dir: &Vector3<S>) -> [S; 16] {
    let mut out = [S::zero(); 16];
    out[0] = sf(SH_C0);
    if degree == 0 {
        return out;
    }
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let c1 = sf::<S>(SH_C1);
    out[1] = -c1 * y;
    out[2] = c1 * z;
    out[3] = -c1 * x;
    if degree == 1 {
        return out;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    let two: S = sf(2.0);
    out[4] = sf::<S>(SH_C2[0]) * xy;
    out[5] = sf::<S>(SH_C2[1]) * yz;
    out[6] = sf::<S>(SH_C2[2]) * (two * zz - xx - yy);
    out[7] = sf::<S>(SH_C2[3]) * xz;
    out[8] = sf::<S>(SH_C2[4]) * (xx - yy);
    if degree == 2 {
        return out;
    }
    let three: S = sf(3.0);
    let four: S = sf(4.0);
    out[9] = sf::<S>(SH_C3[0]) * y * (three * xx - yy);
    out[10] = sf::<S>(SH_C3[1]) * xy * z;
    out[11] = sf::<S>(SH_C3[2]) * y * (four * zz - xx - yy);
    out[12] = sf::<S>(SH_C3[3]) * z * (two * zz - three * xx - three * yy);
    out[13] = sf::<S>(SH_C3[4]) * x * (four * zz - xx - yy);
    out[14] = sf::<S>(SH_C3[5]) * z * (xx - yy);
    out[15] = sf::<S>(SH_C3[6]) * x * (xx - three * yy);
    out
}

/// ∂Y_lm/∂dir, treating the components of `dir` as free coordinates (the
/// chain through normalization is the caller's).
pub fn sh_basis_grad<S: Scalar>(degree: u32, dir: &Vector3<S>) -> [Vector3<S>; 16] {
    let mut out = [Vector3::zeros(); 16];
    if degree == 0 {
        return out;
    }
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let c1 = sf::<S>(SH_C1);
    let zero = S::zero();
    out[1] = Vector3::new(zero, -c1, zero);
    out[2] = Vector3::new(zero, zero, c1);
    out[3] = Vector3::new(-c1, zero, zero);
    if degree == 1 {
        return out;
    }
    let two: S = sf(2.0);
    let four: S = sf(4.0);
    out[4] = Vector3::new(y, x, zero) * sf::<S>(SH_C2[0]);
    out[5] = Vector3::new(zero, z, y) * sf::<S>(SH_C2[1]);
    out[6] = Vector3::new(-two * x, -two * y, four * z) * sf::<S>(SH_C2[2]);
    out[7] = Vector3::new(z, zero, x) * sf::<S>(SH_C2[3]);
    out[8] = Vector3::new(two * x, -two * y, zero) * sf::<S>(SH_C2[4]);
    if degree == 2 {
        return out;
    }
    let three: S = sf(3.0);
    let six: S = sf(6.0);
    let eight: S = sf(8.0);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[9] = Vector3::new(six * x * y, three * xx - three * yy, zero) * sf::<S>(SH_C3[0]);
    out[10] = Vector3::new(y * z, x * z, x * y) * sf::<S>(SH_C3[1]);
    out[11] = Vector3::new(
        -two * x * y,
        four * zz - xx - three * yy,
        eight * y * z,
    ) * sf::<S>(SH_C3[2]);
    out[12] = Vector3::new(
        -six * x * z,
        -six * y * z,
        six * zz - three * xx - three * yy,
    ) * sf::<S>(SH_C3[3]);
    out[13] = Vector3::new(
        four * zz - three * xx - yy,
        -two * x * y,
        eight * x * z,
    ) * sf::<S>(SH_C3[4]);
    out[14] = Vector3::new(two * x * z, -two * y * z, xx - yy) * sf::<S>(SH_C3[5]);
    out[15] = Vector3::new(three * xx - three * yy, -six * x * y, zero) * sf::<S>(SH_C3[6]);
    out
}

/// rgb = clamp(Σ_lm c_lm·Y_lm(viewdir), 0, 1). `sh` is coefficient-major
/// with 3 channels per coefficient; the gradient with respect to `sh` is the
/// basis values (before the clamp).
pub fn eval_sh<S: Scalar>(sh: &[S], viewdir: &Vector3<S>, degree: u32) -> Result<Vector3<S>, SplatError> {
    if degree > 3 {
        return Err(SplatError::ShapeError(format!("SH degree {degree} > 3")));
    }
    let coeffs = basis_len(degree);
    if sh.len() != coeffs * 3 {
        return Err(SplatError::ShapeError(format!(
            "expected {} SH values for degree {degree}, got {}",
            coeffs * 3,
            sh.len()
        )));
    }
    let raw = eval_sh_raw(sh, viewdir, degree);
    Ok(raw.map(|v| v.clamp(S::zero(), S::one())))
}

/// Unclamped SH evaluation; callers that need the clamp gate keep the raw
/// value alongside.
pub(crate) fn eval_sh_raw<S: Scalar>(sh: &[S], viewdir: &Vector3<S>, degree: u32) -> Vector3<S> {
    let basis = sh_basis(degree, viewdir);
    let coeffs = basis_len(degree);
    let mut rgb = Vector3::zeros();
    for l in 0..coeffs {
        for ch in 0..3 {
            rgb[ch] += sh[l * 3 + ch] * basis[l];
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree0_is_constant_and_exact() {
        let sh = [1.0 / SH_C0, 0.0, 0.0];
        for dir in [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.6, -0.8, 0.0),
        ] {
            let rgb = eval_sh(&sh, &dir, 0).unwrap();
            assert!((rgb[0] - 1.0).abs() < 1e-12);
            assert_eq!(rgb[1], 0.0);
            assert_eq!(rgb[2], 0.0);
        }
    }

    #[test]
    fn degree1_z_band_is_antisymmetric() {
        // DC plus a pure z-linear band on the red channel.
        let mut sh = vec![0.0; 12];
        sh[0] = 0.5 / SH_C0;
        sh[2 * 3] = 0.3; // coefficient index 2 is the z band
        let up = eval_sh(&sh, &Vector3::new(0.0, 0.0, 1.0), 1).unwrap();
        let dn = eval_sh(&sh, &Vector3::new(0.0, 0.0, -1.0), 1).unwrap();
        assert!((up[0] - (0.5 + 0.488602511902919_92 * 0.3)).abs() < 1e-12);
        assert!((dn[0] - (0.5 - 0.488602511902919_92 * 0.3)).abs() < 1e-12);
        assert!(((up[0] + dn[0]) / 2.0 - 0.5).abs() < 1e-12);
        assert_ne!(up[0], dn[0]);
    }

    #[test]
    fn shape_errors() {
        let sh = [0.0; 3];
        assert!(eval_sh(&sh, &Vector3::new(0.0, 0.0, 1.0), 1).is_err());
        assert!(eval_sh(&sh, &Vector3::new(0.0, 0.0, 1.0), 4).is_err());
    }

    #[test]
    fn clamp_applies_per_channel() {
        let sh = [10.0, -10.0, 0.5 / SH_C0];
        let rgb = eval_sh(&sh, &Vector3::new(0.0, 0.0, 1.0), 0).unwrap();
        assert_eq!(rgb[0], 1.0);
        assert_eq!(rgb[1], 0.0);
        assert!((rgb[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn basis_grad_matches_finite_differences() {
        // The basis is polynomial in the (pre-normalization) coordinates, so
        // central differences on raw coordinates must match the analytic
        // gradients tightly, including off the unit sphere.
        let dirs = [
            Vector3::new(0.3, -0.5, 0.81),
            Vector3::new(-0.7, 0.1, 0.7),
            Vector3::new(0.1, 0.9, -0.42),
        ];
        let h: f64 = 1e-6;
        for degree in 0..=3u32 {
            for d in dirs {
                let grad = sh_basis_grad(degree, &d);
                for axis in 0..3 {
                    let mut dp = d;
                    let mut dm = d;
                    dp[axis] += h;
                    dm[axis] -= h;
                    let bp = sh_basis(degree, &dp);
                    let bm = sh_basis(degree, &dm);
                    for l in 0..basis_len(degree) {
                        let fd = (bp[l] - bm[l]) / (2.0 * h);
                        assert!(
                            (grad[l][axis] - fd).abs() < 1e-7,
                            "degree {degree} basis {l} axis {axis}: {} vs {fd}",
                            grad[l][axis]
                        );
                    }
                }
            }
        }
    }
}
