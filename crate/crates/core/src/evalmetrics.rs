//! Pose and depth evaluation: relative pose accuracy, similarity alignment
//! of trajectories, and scale-aligned depth error metrics.
//!
//! Everything here is scale-free or explicitly scale-aligned, because the
//! self-supervised reconstruction is only determined up to a similarity
//! transform: RPA compares relative rotations and relative translation
//! *directions*, trajectories are aligned with a closed-form similarity fit
//! before residuals are taken, and depth maps are median-rescaled.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{quat_angle, relative_pose, rot_to_quat, CameraPose};
use crate::scalar::Scalar;

/// Relative translations below this norm count as "no translation".
const TRANS_DIR_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pose sets index mismatch: {0}")]
    IndexMismatch(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("empty valid mask")]
    EmptyMask,
    #[error("shape error: {0}")]
    ShapeError(String),
}

/// An ordered list of poses tagged with unique frame indices.
#[derive(Debug, Clone)]
pub struct PoseSet<S: Scalar> {
    frames: Vec<usize>,
    poses: Vec<CameraPose<S>>,
}

impl<S: Scalar> PoseSet<S> {
    pub fn new(frames: Vec<usize>, poses: Vec<CameraPose<S>>) -> Result<Self, EvalError> {
        if frames.len() != poses.len() {
            return Err(EvalError::ShapeError(format!(
                "{} frame indices for {} poses",
                frames.len(),
                poses.len()
            )));
        }
        let mut seen = frames.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != frames.len() {
            return Err(EvalError::IndexMismatch("duplicate frame index".into()));
        }
        Ok(Self { frames, poses })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn poses(&self) -> &[CameraPose<S>] {
        &self.poses
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.center().map(|v| v.to_f64())).collect()
    }
}

/// Per-pair relative pose errors, both in degrees.
#[derive(Debug, Clone, Serialize)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub rot_deg: f64,
    pub trans_deg: f64,
}

/// Relative pose accuracy at a set of angular thresholds.
#[derive(Debug, Clone, Serialize)]
pub struct RpaReport {
    pub thresholds_deg: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub pair_count: usize,
    pub pairs: Vec<PairError>,
}

impl RpaReport {
    /// Accuracy at the given threshold; the threshold must be one the report
    /// was built with.
    pub fn at(&self, threshold_deg: f64) -> Option<f64> {
        self.thresholds_deg
            .iter()
            .position(|&t| t == threshold_deg)
            .map(|k| self.accuracy[k])
    }
}

/// Angle in degrees between two translation vectors, with the zero-norm
/// convention: both near zero → 0°, exactly one near zero → 180°.
fn translation_direction_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    match (na < TRANS_DIR_EPS, nb < TRANS_DIR_EPS) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 180.0,
        (false, false) => {
            let c = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
            c.acos().to_degrees()
        }
    }
}

/// Relative pose accuracy over all unordered pairs.
///
/// For each pair (i, j), the predicted and ground-truth relative transforms
/// `T_j ∘ T_i⁻¹` are compared: rotation error is the geodesic angle between
/// the relative rotations, translation error the angle between the relative
/// translation directions. A pair is accurate at threshold θ iff
/// `max(rot, trans) < θ`. Pairs are matched by frame index, so `pred` may
/// list its frames in any order.
pub fn rpa<S: Scalar>(
    pred: &PoseSet<S>,
    gt: &PoseSet<S>,
    thresholds_deg: &[f64],
) -> Result<RpaReport, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::IndexMismatch(format!(
            "{} predicted vs {} ground-truth poses",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(EvalError::IndexMismatch("need at least 2 poses".into()));
    }
    // Align gt to pred's frame order.
    let mut gt_of = Vec::with_capacity(pred.len());
    for &f in &pred.frames {
        let k = gt
            .frames
            .iter()
            .position(|&g| g == f)
            .ok_or_else(|| EvalError::IndexMismatch(format!("frame {f} missing from gt")))?;
        gt_of.push(&gt.poses[k]);
    }

    let pred64: Vec<CameraPose<f64>> = pred.poses.iter().map(|p| p.cast()).collect();
    let gt64: Vec<CameraPose<f64>> = gt_of.iter().map(|p| p.cast()).collect();

    let n = pred.len();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let rp = relative_pose(&pred64[i], &pred64[j]);
            let rg = relative_pose(&gt64[i], &gt64[j]);
            let rot_deg = quat_angle(
                &rot_to_quat(&rp.rotation()),
                &rot_to_quat(&rg.rotation()),
            )
            .to_degrees();
            let trans_deg = translation_direction_deg(&rp.trans, &rg.trans);
            pairs.push(PairError { i: pred.frames[i], j: pred.frames[j], rot_deg, trans_deg });
        }
    }

    let accuracy = thresholds_deg
        .iter()
        .map(|&t| {
            let good = pairs.iter().filter(|p| p.rot_deg.max(p.trans_deg) < t).count();
            good as f64 / pairs.len() as f64
        })
        .collect();
    Ok(RpaReport {
        thresholds_deg: thresholds_deg.to_vec(),
        accuracy,
        pair_count: pairs.len(),
        pairs,
    })
}

/// Closed-form similarity alignment of point sets.
#[derive(Debug, Clone)]
pub struct SimilarityFit {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub rmse: f64,
}

impl SimilarityFit {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity transform mapping `pred` onto `gt` (Umeyama).
///
/// Minimizes Σ‖gt_i − (s·R·pred_i + t)‖² in closed form via the SVD of the
/// cross-covariance, with the determinant correction for reflections.
pub fn umeyama_align(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<SimilarityFit, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeError(format!(
            "{} predicted vs {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    if n < 3 {
        return Err(EvalError::DegenerateConfiguration(format!(
            "need at least 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mean_p: Vector3<f64> = pred.iter().sum::<Vector3<f64>>() / nf;
    let mean_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / nf;

    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let pc = p - mean_p;
        let gc = g - mean_g;
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
    }
    cov /= nf;
    var_p /= nf;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let d = svd.singular_values;
    // Collinear or coincident points leave the similarity underdetermined.
    if d[1] < 1e-9 * d[0].max(1e-300) || d[0] == 0.0 {
        return Err(EvalError::DegenerateConfiguration(
            "points are collinear or coincident".into(),
        ));
    }
    let sign = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let mut s_diag = Vector3::new(1.0, 1.0, sign);
    let rotation = u * Matrix3::from_diagonal(&s_diag) * vt;
    s_diag = Vector3::new(d[0], d[1], sign * d[2]);
    let scale = s_diag.sum() / var_p;
    let translation = mean_g - rotation * mean_p * scale;

    let fit = SimilarityFit { scale, rotation, translation, rmse: 0.0 };
    let sse: f64 = pred.iter().zip(gt).map(|(p, g)| (g - fit.apply(p)).norm_squared()).sum();
    Ok(SimilarityFit { rmse: (sse / nf).sqrt(), ..fit })
}

/// Scale-aligned depth errors over a validity mask.
#[derive(Debug, Clone, Serialize)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub delta125: f64,
    /// median(gt)/median(pred) factor applied to pred before scoring.
    pub median_scale: f64,
    pub n_valid: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// AbsRel and δ<1.25 after per-image median scale alignment.
///
/// A pixel participates when the mask is set and both depths are positive;
/// the mask is expected to already exclude gt ≤ 0 and zero-alpha predictions.
pub fn depth_metrics(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
) -> Result<DepthMetrics, EvalError> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(EvalError::ShapeError(format!(
            "depth buffers disagree: pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let valid: Vec<usize> = (0..gt.len())
        .filter(|&i| mask[i] && gt[i] > 0.0 && pred[i] > 0.0 && pred[i].is_finite())
        .collect();
    if valid.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let mut gs: Vec<f64> = valid.iter().map(|&i| gt[i]).collect();
    let mut ps: Vec<f64> = valid.iter().map(|&i| pred[i]).collect();
    let scale = median(&mut gs) / median(&mut ps);

    let mut absrel = 0.0;
    let mut hits = 0usize;
    for &i in &valid {
        let p = pred[i] * scale;
        let g = gt[i];
        absrel += (p - g).abs() / g;
        if (p / g).max(g / p) < 1.25 {
            hits += 1;
        }
    }
    Ok(DepthMetrics {
        absrel: absrel / valid.len() as f64,
        delta125: hits as f64 / valid.len() as f64,
        median_scale: scale,
        n_valid: valid.len(),
    })
}
