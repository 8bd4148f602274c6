//! Self-supervised joint optimization of cameras and per-pixel Gaussians.
//!
//! Each training window draws V frames, splits them into reference and
//! target views (endpoints always reference), initializes one Gaussian per
//! reference pixel, and descends the photometric loss of the rendered
//! target views. Cameras persist across windows keyed by frame index;
//! Gaussians are re-initialized per window unless warm-starting.
//!
//! Optimizer hygiene follows a fixed recipe: the global gradient norm is
//! computed over every parameter group, steps above `skip_norm` are dropped
//! without advancing the moments, surviving gradients are clipped to
//! `clip_norm`, and per-group Adam updates are capped at lr·clip_norm in
//! update norm. Extrinsic updates live on the SE(3) tangent and are applied
//! as T ← exp(−η·ξ)·T.
//!
//! Gauge: the reconstruction is defined up to a similarity, so after every
//! applied step the window is renormalized to mean activated depth 1 (with
//! translations rescaled to match) and re-anchored so the first window view
//! is the identity. Both moves are exactly render-invariant; persisted poses
//! are re-expressed in the registry's frame on window exit.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nalgebra::{Vector3, Vector4};

use crate::curriculum::{
    sample_window, CurriculumError, CurriculumSchedule, OverlapProfile,
};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::photometric::{photometric_loss, Image, PhotometricError};
use crate::scalar::{sf, Scalar};
use crate::splat::{
    basis_len, render, render_backward, softplus, softplus_inv, GaussianSet, GradientBundle,
    PixelGaussian, RenderOptions, SplatError, SH_C0,
};
use crate::synthscene::SceneSequence;

/// Renormalization is skipped when the depth gauge is already this close to
/// 1, so zero-gradient steps leave parameters bitwise untouched.
const GAUGE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SelfcalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at window {window} step {step}")]
    NonFiniteLoss { window: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Photometric(#[from] PhotometricError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumMode {
    /// Windows at a random overlap target (or contiguous without a profile).
    #[default]
    None,
    Geometric,
    Semantic,
}

/// All knobs of one fit; serializable so runs can be described by a file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Views per training window.
    pub views: usize,
    /// Reference views per window (the rest become targets).
    pub k_ref: usize,
    /// Perceptual-term weight of the photometric loss.
    pub lambda: f64,
    pub windows: usize,
    pub steps_per_window: usize,
    pub lr_gaussians: f64,
    pub lr_extrinsics: f64,
    pub lr_intrinsics: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub skip_norm: f64,
    pub curriculum: CurriculumMode,
    pub warm_fraction: f64,
    pub init_depth: f64,
    pub sh_degree: u32,
    pub seed: u64,
    /// Carry Gaussians of re-used reference frames into the next window.
    pub warm_start: bool,
    /// Expected image resolution; 0 accepts whatever the sequence holds.
    pub width: u32,
    pub height: u32,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            views: 10,
            k_ref: 5,
            lambda: 0.5,
            windows: 1,
            steps_per_window: 100,
            lr_gaussians: 1e-2,
            lr_extrinsics: 1e-3,
            lr_intrinsics: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            clip_norm: 1.0,
            skip_norm: 5.0,
            curriculum: CurriculumMode::None,
            warm_fraction: 0.5,
            init_depth: 1.0,
            sh_degree: 0,
            seed: 0,
            warm_start: false,
            width: 0,
            height: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), SelfcalError> {
        let fail = |msg: String| Err(SelfcalError::Config(msg));
        if self.k_ref < 2 || self.k_ref >= self.views {
            return fail(format!(
                "need 2 <= k_ref < views, got k_ref {} views {}",
                self.k_ref, self.views
            ));
        }
        for (name, lr) in [
            ("lr_gaussians", self.lr_gaussians),
            ("lr_extrinsics", self.lr_extrinsics),
            ("lr_intrinsics", self.lr_intrinsics),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas must lie in [0,1), got {} {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm < self.skip_norm) {
            return fail(format!(
                "need 0 < clip_norm < skip_norm, got {} and {}",
                self.clip_norm, self.skip_norm
            ));
        }
        if self.windows == 0 {
            return fail("windows must be at least 1".into());
        }
        if !(self.init_depth > 0.0) {
            return fail(format!("init_depth must be positive, got {}", self.init_depth));
        }
        if !(self.warm_fraction > 0.0 && self.warm_fraction <= 1.0) {
            return fail(format!("warm_fraction must lie in (0,1], got {}", self.warm_fraction));
        }
        if self.sh_degree > 3 {
            return fail(format!("sh_degree {} > 3", self.sh_degree));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Split window frames into reference and target sets, k_ref positions drawn
/// uniformly without replacement. Camera gradients reach a view directly
/// only while it is a target, so the draw must leave every position free to
/// land in either set; repeated splits then rotate all views through the
/// directly supervised role.
pub fn split_ref_tgt(
    indices: &[usize],
    k_ref: usize,
    rng: &mut StdRng,
) -> Result<(Vec<usize>, Vec<usize>), SelfcalError> {
    let v = indices.len();
    if k_ref < 2 || k_ref >= v {
        return Err(SelfcalError::Config(format!(
            "need 2 <= k_ref < {v}, got {k_ref}"
        )));
    }
    let mut pos: Vec<usize> = (0..v).collect();
    for i in 0..k_ref {
        let j = rng.random_range(i..pos.len());
        pos.swap(i, j);
    }
    let mut ref_pos = pos[..k_ref].to_vec();
    ref_pos.sort_unstable();
    let refs: Vec<usize> = ref_pos.iter().map(|&p| indices[p]).collect();
    let tgts: Vec<usize> = (0..v)
        .filter(|p| !ref_pos.contains(p))
        .map(|p| indices[p])
        .collect();
    Ok((refs, tgts))
}

/// One Gaussian per reference pixel: activated depth `init_depth` along the
/// pixel ray, DC color matching the pixel, an isotropic one-pixel footprint,
/// activated opacity 0.5, identity orientation.
pub fn init_gaussians<S: Scalar>(
    ref_images: &[&[f32]],
    k: &CameraIntrinsics<S>,
    poses: &[CameraPose<S>],
    init_depth: f64,
    sh_degree: u32,
) -> Result<GaussianSet<S>, SelfcalError> {
    if ref_images.len() != poses.len() || ref_images.is_empty() {
        return Err(SelfcalError::Config(format!(
            "{} reference images for {} poses",
            ref_images.len(),
            poses.len()
        )));
    }
    let (w, h) = (k.width as usize, k.height as usize);
    let coeffs = basis_len(sh_degree);
    let d_raw: S = sf(softplus_inv(init_depth));
    let fx = k.fx.to_f64();
    let fy = k.fy.to_f64();
    let scale_raw: S = sf((init_depth * 2.0 / (fx + fy)).ln());

    let mut gaussians = Vec::with_capacity(ref_images.len() * h * w);
    for (view, img) in ref_images.iter().enumerate() {
        if img.len() != h * w * 3 {
            return Err(SelfcalError::Config(format!(
                "reference image {view} holds {} values for {w}x{h}x3",
                img.len()
            )));
        }
        for pix in 0..h * w {
            let mut sh = vec![S::zero(); coeffs * 3];
            for ch in 0..3 {
                sh[ch] = sf(img[pix * 3 + ch] as f64 / SH_C0);
            }
            gaussians.push(PixelGaussian {
                d: d_raw,
                q: Vector4::new(S::one(), S::zero(), S::zero(), S::zero()),
                sh,
                scale: Vector3::from_element(scale_raw),
                opacity: S::zero(),
                source_view: view as u32,
                source_pixel: pix as u32,
            });
        }
    }
    Ok(GaussianSet {
        gaussians,
        sh_degree,
        k_ref: ref_images.len() as u32,
        width: k.width,
        height: k.height,
    })
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Advance the moments and return the bias-corrected update `lr·m̂/(√v̂+ε)`,
    /// capped at lr·clip_norm in norm.
    fn update(&mut self, grad: &[f64], t: usize, lr: f64, cfg: &FitConfig) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.m.len());
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let mut upd = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            upd[i] = lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.eps);
        }
        let norm = upd.iter().map(|u| u * u).sum::<f64>().sqrt();
        let cap = lr * cfg.clip_norm;
        if norm > cap {
            let s = cap / norm;
            for u in &mut upd {
                *u *= s;
            }
        }
        upd
    }
}

/// What one call to [`FitState::apply_bundle`] did.
#[derive(Debug, Clone, Copy)]
pub enum StepAction {
    Applied {
        grad_norm: f64,
        /// Update norms per group: gaussians, extrinsics, intrinsics.
        update_norms: [f64; 3],
    },
    Skipped { grad_norm: f64 },
}

impl StepAction {
    pub fn skipped(&self) -> bool {
        matches!(self, StepAction::Skipped { .. })
    }

    pub fn grad_norm(&self) -> f64 {
        match self {
            StepAction::Applied { grad_norm, .. } | StepAction::Skipped { grad_norm } => *grad_norm,
        }
    }
}

/// Live optimization state of one window.
#[derive(Debug, Clone)]
pub struct FitState<S: Scalar> {
    pub set: GaussianSet<S>,
    /// Window frame indices, ascending.
    pub frames: Vec<usize>,
    /// One pose per window frame, same order as `frames`.
    pub poses: Vec<CameraPose<S>>,
    /// Positions of reference views within the window.
    pub ref_pos: Vec<usize>,
    /// Positions of target views within the window.
    pub tgt_pos: Vec<usize>,
    pub intrinsics: CameraIntrinsics<S>,
    pub step: usize,
    pub progress: f64,
    gauss_moments: Moments,
    ext_moments: Moments,
    intr_moments: Moments,
    adam_t: usize,
}

/// Per-step record kept in [`FitResult::diagnostics`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepDiag {
    pub window: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

#[derive(Debug)]
pub struct FitResult<S: Scalar> {
    pub state: FitState<S>,
    pub loss_history: Vec<f64>,
    pub diagnostics: Vec<StepDiag>,
    pub wall_secs: f64,
    /// Final camera registry: every frame ever fitted, ascending.
    pub poses_by_frame: Vec<(usize, CameraPose<S>)>,
}

/// Number of raw parameters of one Gaussian: d, quat, SH, scale, opacity.
fn gauss_param_len(coeffs: usize) -> usize {
    9 + 3 * coeffs
}

/// Flatten the bundle's Gaussian gradients into the fixed parameter layout.
fn flatten_gauss_grad(bundle: &GradientBundle) -> Vec<f64> {
    let c = bundle.sh_coeffs;
    let mut out = Vec::with_capacity(bundle.n * gauss_param_len(c));
    for i in 0..bundle.n {
        out.push(bundle.d[i]);
        out.extend_from_slice(&bundle.q[4 * i..4 * i + 4]);
        out.extend_from_slice(&bundle.sh[3 * c * i..3 * c * (i + 1)]);
        out.extend_from_slice(&bundle.scale[3 * i..3 * i + 3]);
        out.push(bundle.opacity[i]);
    }
    out
}

impl<S: Scalar> FitState<S> {
    /// Build a window state around an initialized Gaussian set.
    pub fn new(
        set: GaussianSet<S>,
        frames: Vec<usize>,
        poses: Vec<CameraPose<S>>,
        ref_pos: Vec<usize>,
        tgt_pos: Vec<usize>,
        intrinsics: CameraIntrinsics<S>,
    ) -> Result<Self, SelfcalError> {
        if frames.len() != poses.len() || ref_pos.len() != set.k_ref as usize {
            return Err(SelfcalError::Config(format!(
                "window shape mismatch: {} frames, {} poses, {} refs for k_ref {}",
                frames.len(),
                poses.len(),
                ref_pos.len(),
                set.k_ref
            )));
        }
        let coeffs = basis_len(set.sh_degree);
        let n_gauss = set.gaussians.len() * gauss_param_len(coeffs);
        let n_ext = 6 * poses.len();
        let mut state = Self {
            set,
            frames,
            poses,
            ref_pos,
            tgt_pos,
            intrinsics,
            step: 0,
            progress: 0.0,
            gauss_moments: Moments::zeros(n_gauss),
            ext_moments: Moments::zeros(n_ext),
            intr_moments: Moments::zeros(4),
            adam_t: 0,
        };
        state.apply_gauge();
        Ok(state)
    }

    /// Apply one accumulated gradient with full optimizer hygiene.
    ///
    /// The bundle's `source_poses` must hold one 6-vector per window view in
    /// window order (`target_pose` is ignored); `fit_step` accumulates
    /// per-render bundles into that layout. Skipped steps (global norm above
    /// `skip_norm`, or any non-finite gradient) change nothing, moments
    /// included.
    pub fn apply_bundle(&mut self, bundle: &GradientBundle, cfg: &FitConfig) -> StepAction {
        let gauss = flatten_gauss_grad(bundle);
        let ext: Vec<f64> = bundle.source_poses.iter().flatten().copied().collect();
        debug_assert_eq!(ext.len(), 6 * self.poses.len());
        let intr = bundle.intrinsics;

        let sq: f64 = gauss.iter().chain(&ext).chain(&intr).map(|g| g * g).sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() || grad_norm > cfg.skip_norm {
            return StepAction::Skipped { grad_norm };
        }

        let clip = (cfg.clip_norm / grad_norm).min(1.0);
        let scale_grad = |g: Vec<f64>| g.into_iter().map(|x| x * clip).collect::<Vec<_>>();
        let (gauss, ext) = (scale_grad(gauss), scale_grad(ext));
        let intr: Vec<f64> = intr.iter().map(|x| x * clip).collect();

        self.adam_t += 1;
        let upd_g = self.gauss_moments.update(&gauss, self.adam_t, cfg.lr_gaussians, cfg);
        let upd_e = self.ext_moments.update(&ext, self.adam_t, cfg.lr_extrinsics, cfg);
        let upd_k = self.intr_moments.update(&intr, self.adam_t, cfg.lr_intrinsics, cfg);
        let norm = |u: &[f64]| u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let update_norms = [norm(&upd_g), norm(&upd_e), norm(&upd_k)];

        let c = basis_len(self.set.sh_degree);
        let stride = gauss_param_len(c);
        for (i, g) in self.set.gaussians.iter_mut().enumerate() {
            let u = &upd_g[i * stride..(i + 1) * stride];
            g.d -= sf::<S>(u[0]);
            for k in 0..4 {
                g.q[k] -= sf::<S>(u[1 + k]);
            }
            for k in 0..3 * c {
                g.sh[k] -= sf::<S>(u[5 + k]);
            }
            for k in 0..3 {
                g.scale[k] -= sf::<S>(u[5 + 3 * c + k]);
            }
            g.opacity -= sf::<S>(u[8 + 3 * c]);
        }
        for (k, pose) in self.poses.iter_mut().enumerate() {
            let u = &upd_e[6 * k..6 * k + 6];
            let xi: [S; 6] = std::array::from_fn(|i| sf(-u[i]));
            *pose = pose.retract(&xi);
        }
        let ki = &mut self.intrinsics;
        ki.fx = (ki.fx - sf::<S>(upd_k[0])).max(sf::<S>(1e-3));
        ki.fy = (ki.fy - sf::<S>(upd_k[1])).max(sf::<S>(1e-3));
        ki.cx -= sf::<S>(upd_k[2]);
        ki.cy -= sf::<S>(upd_k[3]);

        self.apply_gauge();
        StepAction::Applied { grad_norm, update_norms }
    }

    /// Restore the similarity gauge: mean activated depth 1 (translations
    /// rescaled to match) and identity first pose. Both are render-invariant
    /// and skipped when already satisfied, so no-op steps stay bitwise no-ops.
    fn apply_gauge(&mut self) {
        let n = self.set.gaussians.len() as f64;
        let mean: f64 = self
            .set
            .gaussians
            .iter()
            .map(|g| softplus(g.d).to_f64())
            .sum::<f64>()
            / n;
        if mean.is_finite() && mean > 0.0 && (mean - 1.0).abs() > GAUGE_TOL {
            let log_mean: S = sf(mean.ln());
            let inv: S = sf(1.0 / mean);
            for g in &mut self.set.gaussians {
                let act = softplus(g.d);
                g.d = softplus_inv(act * inv);
                g.scale = g.scale.map(|s| s - log_mean);
            }
            for pose in &mut self.poses {
                pose.trans *= inv;
            }
        }

        let first = self.poses[0];
        let is_identity = first.quat() == Vector4::new(S::one(), S::zero(), S::zero(), S::zero())
            && first.trans == Vector3::zeros();
        if !is_identity {
            let anchor_inv = first.inverse();
            for pose in &mut self.poses {
                *pose = pose.compose(&anchor_inv);
            }
        }
    }

    /// Render every target view, accumulate the photometric gradient, and
    /// apply it. Returns the mean loss over targets and what the step did.
    pub fn fit_step(
        &mut self,
        targets: &[Image<S>],
        cfg: &FitConfig,
    ) -> Result<(f64, StepAction), SelfcalError> {
        assert_eq!(targets.len(), self.tgt_pos.len());
        let source_poses: Vec<CameraPose<S>> =
            self.ref_pos.iter().map(|&p| self.poses[p]).collect();
        let opts = RenderOptions::default();
        let n_tgt = self.tgt_pos.len().max(1) as f64;
        let lambda: S = sf(cfg.lambda);

        let per_target: Vec<(f64, GradientBundle)> = self
            .tgt_pos
            .par_iter()
            .zip(targets.par_iter())
            .map(|(&tp, target)| {
                let (out, ctx) =
                    render(&self.set, &source_poses, &self.intrinsics, &self.poses[tp], &opts)?;
                let pred = Image::new(out.width, out.height, out.rgb)?;
                let lv = photometric_loss(&pred, target, lambda)?;
                let grad: Vec<f64> =
                    lv.grad_image.iter().map(|g| g.to_f64() / n_tgt).collect();
                let bundle = render_backward(&ctx, &grad, None)?;
                Ok((lv.total.to_f64(), bundle))
            })
            .collect::<Result<_, SelfcalError>>()?;

        let coeffs = basis_len(self.set.sh_degree);
        let mut acc = GradientBundle::zeros(self.set.gaussians.len(), coeffs, self.poses.len());
        let mut loss = 0.0;
        for (t_idx, (l, b)) in per_target.iter().enumerate() {
            loss += l / n_tgt;
            for i in 0..b.n {
                acc.d[i] += b.d[i];
                acc.opacity[i] += b.opacity[i];
            }
            for (a, x) in acc.q.iter_mut().zip(&b.q) {
                *a += x;
            }
            for (a, x) in acc.sh.iter_mut().zip(&b.sh) {
                *a += x;
            }
            for (a, x) in acc.scale.iter_mut().zip(&b.scale) {
                *a += x;
            }
            for k in 0..4 {
                acc.intrinsics[k] += b.intrinsics[k];
            }
            for (r, &pos) in self.ref_pos.iter().enumerate() {
                for k in 0..6 {
                    acc.source_poses[pos][k] += b.source_poses[r][k];
                }
            }
            let tpos = self.tgt_pos[t_idx];
            for k in 0..6 {
                acc.source_poses[tpos][k] += b.target_pose[k];
            }
        }

        let action = self.apply_bundle(&acc, cfg);
        self.step += 1;
        Ok((loss, action))
    }
}

/// Pose for a new frame: the nearest already-fitted frame's pose, or
/// identity when the registry is empty.
fn seed_pose<S: Scalar>(
    registry: &HashMap<usize, CameraPose<S>>,
    frame: usize,
) -> CameraPose<S> {
    registry
        .iter()
        .min_by_key(|(f, _)| (frame.abs_diff(**f), **f))
        .map(|(_, p)| *p)
        .unwrap_or_else(CameraPose::identity)
}

/// Run the full self-calibration loop over a sequence.
///
/// `profile` is required for the geometric/semantic curricula; without a
/// curriculum it is optional (windows then draw a uniform overlap target
/// from the schedule band, or fall back to contiguous frames). `init_poses`
/// seeds the camera registry by frame index. Ground truth is never read.
pub fn fit<S: Scalar>(
    seq: &SceneSequence,
    profile: Option<&OverlapProfile>,
    cfg: &FitConfig,
    init_poses: Option<&[(usize, CameraPose<S>)]>,
) -> Result<FitResult<S>, SelfcalError> {
    cfg.validate()?;
    if cfg.curriculum != CurriculumMode::None && profile.is_none() {
        return Err(SelfcalError::Config(
            "curriculum requires an overlap profile".into(),
        ));
    }
    if (cfg.width != 0 && cfg.width != seq.width) || (cfg.height != 0 && cfg.height != seq.height)
    {
        return Err(SelfcalError::Config(format!(
            "config expects {}x{} but the sequence is {}x{}",
            cfg.width, cfg.height, seq.width, seq.height
        )));
    }
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let schedule = {
        let base = match cfg.curriculum {
            CurriculumMode::Semantic => CurriculumSchedule::semantic(),
            _ => CurriculumSchedule::geometric(),
        };
        CurriculumSchedule::new(base.o_min, base.o_max, cfg.warm_fraction)
            .map_err(SelfcalError::Curriculum)?
    };

    let mut registry: HashMap<usize, CameraPose<S>> = HashMap::new();
    if let Some(init) = init_poses {
        for (frame, pose) in init {
            registry.insert(*frame, *pose);
        }
    }
    // Initial intrinsics guess: principal point centered, focal = width.
    let mut intrinsics = CameraIntrinsics::new(
        sf::<S>(seq.width as f64),
        sf::<S>(seq.width as f64),
        sf::<S>(seq.width as f64 * 0.5),
        sf::<S>(seq.height as f64 * 0.5),
        seq.width,
        seq.height,
    )
    .map_err(|e| SelfcalError::Config(e.to_string()))?;

    let total_steps = cfg.windows * cfg.steps_per_window;
    let mut loss_history = Vec::with_capacity(total_steps);
    let mut diagnostics = Vec::with_capacity(total_steps);
    let mut carried: HashMap<usize, Vec<PixelGaussian<S>>> = HashMap::new();
    let mut last_state: Option<FitState<S>> = None;

    for w in 0..cfg.windows {
        let s = schedule.progress(w * cfg.steps_per_window, total_steps);
        let window = match (cfg.curriculum, profile) {
            (CurriculumMode::None, Some(p)) => {
                // No annealing: draw the overlap target uniformly from the
                // schedule band instead.
                let o = rng.random_range(schedule.o_min..=schedule.o_max);
                let flat = CurriculumSchedule::new(o, o, 1.0).map_err(SelfcalError::Curriculum)?;
                sample_window(seq.len(), p, &flat, 1.0, cfg.views, &mut rng)?
            }
            (CurriculumMode::None, None) => {
                if seq.len() < cfg.views {
                    return Err(SelfcalError::Curriculum(CurriculumError::SequenceTooShort));
                }
                let start = rng.random_range(0..=seq.len() - cfg.views);
                (start..start + cfg.views).collect()
            }
            (_, p) => sample_window(
                seq.len(),
                p.expect("checked above"),
                &schedule,
                s,
                cfg.views,
                &mut rng,
            )?,
        };
        let (refs, _tgts) = split_ref_tgt(&window, cfg.k_ref, &mut rng)?;
        let ref_pos: Vec<usize> =
            window.iter().enumerate().filter(|(_, f)| refs.contains(f)).map(|(p, _)| p).collect();
        let tgt_pos: Vec<usize> =
            (0..window.len()).filter(|p| !ref_pos.contains(p)).collect();

        // The window anchor: poses enter in registry gauge and are restored
        // to it on exit, so frames shared across windows stitch moves only
        // by their optimization delta.
        let anchor = seed_pose(&registry, window[0]);
        let poses: Vec<CameraPose<S>> = window
            .iter()
            .map(|f| registry.get(f).copied().unwrap_or_else(|| seed_pose(&registry, *f)))
            .collect();

        let ref_images: Vec<&[f32]> = refs.iter().map(|&f| seq.frame(f)).collect();
        let ref_poses: Vec<CameraPose<S>> = ref_pos.iter().map(|&p| poses[p]).collect();
        // Only the first window consumes the caller's metric depth guess.
        // Later windows inherit registry poses, which the per-step gauge has
        // already renormalized to unit mean depth; re-initializing at any
        // other constant would shear cameras against the scene scale.
        let window_depth = if w == 0 { cfg.init_depth } else { 1.0 };
        let mut set =
            init_gaussians(&ref_images, &intrinsics, &ref_poses, window_depth, cfg.sh_degree)?;
        if cfg.warm_start {
            let per_view = (seq.width * seq.height) as usize;
            for (r, frame) in refs.iter().enumerate() {
                if let Some(old) = carried.get(frame) {
                    for (g, o) in set.gaussians[r * per_view..(r + 1) * per_view]
                        .iter_mut()
                        .zip(old)
                    {
                        let view = g.source_view;
                        *g = o.clone();
                        g.source_view = view;
                    }
                }
            }
        }

        let targets: Vec<Image<S>> = tgt_pos
            .iter()
            .map(|&p| {
                let data = seq.frame(window[p]).iter().map(|&v| sf::<S>(v as f64)).collect();
                Image::new(seq.width, seq.height, data).map_err(SelfcalError::Photometric)
            })
            .collect::<Result<_, _>>()?;

        let mut state =
            FitState::new(set, window.clone(), poses, ref_pos, tgt_pos, intrinsics.clone())?;
        state.progress = s;

        for inner in 0..cfg.steps_per_window {
            let (loss, action) = state.fit_step(&targets, cfg)?;
            if !loss.is_finite() {
                return Err(SelfcalError::NonFiniteLoss { window: w, step: inner, loss });
            }
            loss_history.push(loss);
            diagnostics.push(StepDiag {
                window: w,
                step: w * cfg.steps_per_window + inner,
                loss,
                grad_norm: action.grad_norm(),
                skipped: action.skipped(),
            });
        }

        // Persist in registry gauge.
        for (p, frame) in state.frames.iter().enumerate() {
            registry.insert(*frame, state.poses[p].compose(&anchor));
        }
        intrinsics = state.intrinsics.clone();
        if cfg.warm_start {
            let per_view = (seq.width * seq.height) as usize;
            carried.clear();
            for (r, frame) in refs.iter().enumerate() {
                carried.insert(
                    *frame,
                    state.set.gaussians[r * per_view..(r + 1) * per_view].to_vec(),
                );
            }
        }
        last_state = Some(state);
    }

    let mut poses_by_frame: Vec<(usize, CameraPose<S>)> = registry.into_iter().collect();
    poses_by_frame.sort_by_key(|(f, _)| *f);
    Ok(FitResult {
        state: last_state.expect("windows >= 1 validated"),
        loss_history,
        diagnostics,
        wall_secs: started.elapsed().as_secs_f64(),
        poses_by_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photometric::psnr;
    use crate::splat::eval_sh;
    use crate::synthscene::{gen_scene, render_dataset, SceneConfig};

    fn plane_seq(n_views: usize, wh: u32) -> SceneSequence {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            preset: "textured-plane".into(),
            n_views,
            width: wh,
            height: wh,
            orbit_deg: 30.0,
            seed: 4,
        };
        render_dataset(&gen_scene(&cfg).unwrap(), dir.path()).unwrap()
    }

    #[test]
    fn split_covers_window_and_rotates_roles() {
        let idx: Vec<usize> = (10..20).collect();
        let mut rng = StdRng::seed_from_u64(0);
        let (refs, tgts) = split_ref_tgt(&idx, 5, &mut rng).unwrap();
        assert_eq!(refs.len(), 5);
        assert_eq!(tgts.len(), 5);
        let mut all: Vec<usize> = refs.iter().chain(&tgts).copied().collect();
        all.sort_unstable();
        assert_eq!(all, idx);

        // Over repeated draws every frame must appear in both roles.
        let mut seen_ref = [false; 10];
        let mut seen_tgt = [false; 10];
        for _ in 0..64 {
            let (r, t) = split_ref_tgt(&idx, 5, &mut rng).unwrap();
            for f in r {
                seen_ref[f - 10] = true;
            }
            for f in t {
                seen_tgt[f - 10] = true;
            }
        }
        assert!(seen_ref.iter().all(|&b| b) && seen_tgt.iter().all(|&b| b));

        let mut r1 = StdRng::seed_from_u64(7);
        let mut r2 = StdRng::seed_from_u64(7);
        assert_eq!(
            split_ref_tgt(&idx, 5, &mut r1).unwrap(),
            split_ref_tgt(&idx, 5, &mut r2).unwrap()
        );
        let mut rng = StdRng::seed_from_u64(0);
        assert!(split_ref_tgt(&idx, 1, &mut rng).is_err());
        assert!(split_ref_tgt(&idx, 10, &mut rng).is_err());
    }

    #[test]
    fn init_counts_pixels_and_inverts_dc() {
        let k = CameraIntrinsics::<f64>::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
        let mut img = vec![0.0f32; 32 * 32 * 3];
        img[0] = 1.0; // pixel 0 pure red
        let imgs = [img.as_slice(), img.as_slice()];
        let poses = [CameraPose::identity(), CameraPose::identity()];
        let set = init_gaussians(&imgs, &k, &poses, 1.0, 0).unwrap();
        assert_eq!(set.gaussians.len(), 2048);

        let g = &set.gaussians[0];
        let dir = Vector3::new(0.0, 0.0, 1.0);
        let rgb = eval_sh(&g.sh, &dir, 0).unwrap();
        assert!((rgb.x - 1.0).abs() < 1e-12 && rgb.y.abs() < 1e-12);
        assert!((softplus(g.d) - 1.0).abs() < 1e-12);
        assert!((crate::splat::sigmoid(g.opacity) - 0.5).abs() < 1e-12);
        assert!((g.scale.x.exp() - 2.0 / 80.0).abs() < 1e-12);
    }

    #[test]
    fn init_rerenders_its_reference_above_15db() {
        let seq = plane_seq(3, 64);
        let gt = seq.gt.as_ref().unwrap();
        let k = gt.intrinsics.clone();
        let imgs = [seq.frame(0)];
        let poses = [gt.poses[0]];
        let set = init_gaussians(&imgs, &k, &poses, 1.0, 0).unwrap();
        let (out, _) = render(&set, &poses, &k, &poses[0], &RenderOptions::default()).unwrap();
        let pred = Image::new(out.width, out.height, out.rgb).unwrap();
        let target_data: Vec<f64> = seq.frame(0).iter().map(|&v| v as f64).collect();
        let target = Image::new(seq.width, seq.height, target_data).unwrap();
        let db = psnr(&pred, &target).unwrap();
        assert!(db > 15.0, "init re-render PSNR {db:.2} dB");
    }

    fn tiny_state(seq: &SceneSequence, cfg: &FitConfig) -> (FitState<f64>, Vec<Image<f64>>) {
        let gt = seq.gt.as_ref().unwrap();
        let window: Vec<usize> = (0..seq.len()).collect();
        let mut rng = StdRng::seed_from_u64(1);
        let (refs, _) = split_ref_tgt(&window, cfg.k_ref, &mut rng).unwrap();
        let ref_pos: Vec<usize> = window
            .iter()
            .enumerate()
            .filter(|(_, f)| refs.contains(f))
            .map(|(p, _)| p)
            .collect();
        let tgt_pos: Vec<usize> = (0..window.len()).filter(|p| !ref_pos.contains(p)).collect();
        let ref_images: Vec<&[f32]> = refs.iter().map(|&f| seq.frame(f)).collect();
        let k = gt.intrinsics.clone();
        let poses: Vec<CameraPose<f64>> = gt.poses.clone();
        let ref_poses: Vec<CameraPose<f64>> = ref_pos.iter().map(|&p| poses[p]).collect();
        let set = init_gaussians(&ref_images, &k, &ref_poses, cfg.init_depth, 0).unwrap();
        let targets: Vec<Image<f64>> = tgt_pos
            .iter()
            .map(|&p| {
                let data = seq.frame(window[p]).iter().map(|&v| v as f64).collect();
                Image::new(seq.width, seq.height, data).unwrap()
            })
            .collect();
        let state = FitState::new(set, window, poses, ref_pos, tgt_pos, k).unwrap();
        (state, targets)
    }

    #[test]
    fn zero_gradient_step_changes_nothing() {
        let seq = plane_seq(4, 16);
        let cfg = FitConfig { views: 4, k_ref: 2, ..FitConfig::default() };
        let (mut state, _) = tiny_state(&seq, &cfg);
        let before = state.clone();
        let coeffs = basis_len(state.set.sh_degree);
        let zero = GradientBundle::zeros(state.set.gaussians.len(), coeffs, state.poses.len());
        let action = state.apply_bundle(&zero, &cfg);
        assert!(!action.skipped());
        for (a, b) in state.set.gaussians.iter().zip(&before.set.gaussians) {
            assert_eq!(a.d, b.d);
            assert_eq!(a.sh, b.sh);
            assert_eq!(a.opacity, b.opacity);
        }
        for (a, b) in state.poses.iter().zip(&before.poses) {
            assert_eq!(a.quat(), b.quat());
            assert_eq!(a.trans, b.trans);
        }
        assert_eq!(state.adam_t, 1);
    }

    #[test]
    fn oversized_gradients_skip_without_side_effects() {
        let seq = plane_seq(4, 16);
        let cfg = FitConfig { views: 4, k_ref: 2, ..FitConfig::default() };
        let (mut state, _) = tiny_state(&seq, &cfg);
        let before = state.clone();
        let coeffs = basis_len(state.set.sh_degree);
        let mut huge = GradientBundle::zeros(state.set.gaussians.len(), coeffs, state.poses.len());
        for g in &mut huge.d {
            *g = 1.0; // norm = sqrt(n) >> skip_norm
        }
        let action = state.apply_bundle(&huge, &cfg);
        assert!(action.skipped());
        assert!(action.grad_norm() > cfg.skip_norm);
        assert_eq!(state.adam_t, before.adam_t);
        for (a, b) in state.set.gaussians.iter().zip(&before.set.gaussians) {
            assert_eq!(a.d, b.d);
            assert_eq!(a.q, b.q);
        }
        for (a, b) in state.poses.iter().zip(&before.poses) {
            assert_eq!(a.quat(), b.quat());
            assert_eq!(a.trans, b.trans);
        }
        assert_eq!(state.intrinsics.fx, before.intrinsics.fx);
    }

    #[test]
    fn updates_respect_the_per_group_cap() {
        let seq = plane_seq(4, 16);
        let cfg = FitConfig { views: 4, k_ref: 2, ..FitConfig::default() };
        let (mut state, _) = tiny_state(&seq, &cfg);
        let coeffs = basis_len(state.set.sh_degree);
        let n = state.set.gaussians.len();
        let mut bundle = GradientBundle::zeros(n, coeffs, state.poses.len());
        // Norm between clip and skip: clipping engages, the step applies.
        let g = 3.0 / (n as f64).sqrt();
        for x in &mut bundle.d {
            *x = g;
        }
        bundle.source_poses[1][0] = 0.5;
        bundle.intrinsics = [0.3, 0.0, 0.0, 0.0];
        match state.apply_bundle(&bundle, &cfg) {
            StepAction::Applied { grad_norm, update_norms } => {
                assert!(grad_norm > cfg.clip_norm && grad_norm < cfg.skip_norm);
                assert!(update_norms[0] <= cfg.lr_gaussians * cfg.clip_norm * (1.0 + 1e-12));
                assert!(update_norms[1] <= cfg.lr_extrinsics * cfg.clip_norm * (1.0 + 1e-12));
                assert!(update_norms[2] <= cfg.lr_intrinsics * cfg.clip_norm * (1.0 + 1e-12));
            }
            StepAction::Skipped { .. } => panic!("step should apply"),
        }
    }

    #[test]
    fn gauge_moves_are_render_invariant() {
        let seq = plane_seq(4, 16);
        let cfg = FitConfig { views: 4, k_ref: 2, init_depth: 2.0, ..FitConfig::default() };
        let (state, _) = tiny_state(&seq, &cfg);
        // tiny_state builds with init_depth 1.0; rebuild at 2.0 without the
        // constructor so the gauge is visibly off.
        let gt = seq.gt.as_ref().unwrap();
        let refs = [0usize, 3];
        let ref_images: Vec<&[f32]> = refs.iter().map(|&f| seq.frame(f)).collect();
        let ref_poses: Vec<CameraPose<f64>> = refs.iter().map(|&f| gt.poses[f]).collect();
        let set = init_gaussians(&ref_images, &gt.intrinsics, &ref_poses, 2.0, 0).unwrap();
        let mut off = state.clone();
        off.set = set;
        off.poses = gt.poses.clone();

        let opts = RenderOptions::default();
        let srcs: Vec<CameraPose<f64>> = off.ref_pos.iter().map(|&p| off.poses[p]).collect();
        let (before, _) = render(&off.set, &srcs, &off.intrinsics, &off.poses[1], &opts).unwrap();
        off.apply_gauge();
        let mean: f64 = off.set.gaussians.iter().map(|g| softplus(g.d)).sum::<f64>()
            / off.set.gaussians.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert_eq!(off.poses[0].trans, Vector3::zeros());
        let srcs: Vec<CameraPose<f64>> = off.ref_pos.iter().map(|&p| off.poses[p]).collect();
        let (after, _) = render(&off.set, &srcs, &off.intrinsics, &off.poses[1], &opts).unwrap();
        for (a, b) in before.rgb.iter().zip(&after.rgb) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn hundred_steps_halve_the_loss() {
        let seq = plane_seq(6, 32);
        let gt = seq.gt.as_ref().unwrap();
        let init: Vec<(usize, CameraPose<f64>)> =
            gt.poses.iter().enumerate().map(|(f, p)| (f, *p)).collect();
        let cfg = FitConfig {
            views: 6,
            k_ref: 3,
            windows: 1,
            steps_per_window: 100,
            lr_gaussians: 0.1,
            init_depth: 2.5,
            seed: 2,
            ..FitConfig::default()
        };
        let result = fit(&seq, None, &cfg, Some(&init)).unwrap();
        assert_eq!(result.loss_history.len(), 100);
        let (first, last) = (result.loss_history[0], *result.loss_history.last().unwrap());
        assert!(
            last < 0.5 * first,
            "loss {first:.5} -> {last:.5} did not halve"
        );
        assert!(result.diagnostics.iter().all(|d| d.loss.is_finite()));
    }

    #[test]
    fn same_seed_same_history() {
        let seq = plane_seq(5, 16);
        let cfg = FitConfig {
            views: 4,
            k_ref: 2,
            windows: 2,
            steps_per_window: 5,
            seed: 9,
            ..FitConfig::default()
        };
        let a = fit::<f32>(&seq, None, &cfg, None).unwrap();
        let b = fit::<f32>(&seq, None, &cfg, None).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        for ((fa, pa), (fb, pb)) in a.poses_by_frame.iter().zip(&b.poses_by_frame) {
            assert_eq!(fa, fb);
            assert_eq!(pa.quat(), pb.quat());
            assert_eq!(pa.trans, pb.trans);
        }
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let seq = plane_seq(4, 16);
        let cfg = FitConfig {
            views: 4,
            k_ref: 2,
            windows: 1,
            steps_per_window: 0,
            ..FitConfig::default()
        };
        let result = fit::<f64>(&seq, None, &cfg, None).unwrap();
        assert!(result.loss_history.is_empty());
        assert_eq!(result.state.step, 0);
        assert_eq!(result.poses_by_frame.len(), 4);
    }

    #[test]
    fn runaway_learning_rate_errors() {
        let seq = plane_seq(4, 16);
        let cfg = FitConfig {
            views: 4,
            k_ref: 2,
            windows: 1,
            steps_per_window: 20,
            lr_gaussians: 1e12,
            ..FitConfig::default()
        };
        assert!(fit::<f64>(&seq, None, &cfg, None).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let ok = FitConfig::default();
        assert!(ok.validate().is_ok());
        assert!(FitConfig { k_ref: 1, ..ok.clone() }.validate().is_err());
        assert!(FitConfig { k_ref: 10, views: 10, ..ok.clone() }.validate().is_err());
        assert!(FitConfig { lr_gaussians: 0.0, ..ok.clone() }.validate().is_err());
        assert!(FitConfig { clip_norm: 6.0, ..ok.clone() }.validate().is_err());
        assert!(FitConfig { windows: 0, ..ok.clone() }.validate().is_err());

        // Serde roundtrip with partial input picks up defaults.
        let cfg: FitConfig = serde_json::from_str(r#"{"views": 6, "k_ref": 3}"#).unwrap();
        assert_eq!(cfg.views, 6);
        assert_eq!(cfg.steps_per_window, 100);
        assert_eq!(cfg.curriculum, CurriculumMode::None);
        let cfg2: FitConfig =
            serde_json::from_str(r#"{"curriculum": "geometric"}"#).unwrap();
        assert_eq!(cfg2.curriculum, CurriculumMode::Geometric);
    }
}
