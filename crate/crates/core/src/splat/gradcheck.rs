//! Finite-difference verification of the analytic backward pass.
//!
//! Scenes are randomized but engineered to keep every Gaussian clear of the
//! forward discontinuities (the alpha_min cutoff, the alpha_max clamp, the
//! SH color clamp, the near plane), so central differences of the scalar
//! loss Σ grad_rgb⊙rgb are valid two-sided derivatives. The analytic side
//! runs at the working precision `S`; the difference quotients always
//! evaluate the f64 forward path, since at the mandated 1e-4 step an f32
//! forward pass is dominated by rounding noise.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::render::render;
use super::sh::SH_C0;
use super::{
    logit, render_backward, softplus_inv, GaussianSet, PixelGaussian, RenderOptions, SplatError,
};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::scalar::{sf, Scalar};

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub n_scenes: usize,
    pub n_gaussians: usize,
    pub seed: u64,
    /// Central-difference step on raw parameters and tangent directions.
    pub step: f64,
    /// Relative-error tolerance; None picks 1e-3 for f32, 1e-5 for f64.
    pub tol: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { n_scenes: 20, n_gaussians: 8, seed: 0, step: 1e-4, tol: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneReport {
    pub seed: u64,
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// Parameter with the worst relative error.
    pub worst: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub precision: &'static str,
    pub tol: f64,
    pub step: f64,
    pub n_scenes: usize,
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub passed: bool,
    pub scenes: Vec<SceneReport>,
}

struct Scene {
    set: GaussianSet<f64>,
    sources: Vec<CameraPose<f64>>,
    target: CameraPose<f64>,
    k: CameraIntrinsics<f64>,
    grad_rgb: Vec<f64>,
}

const W: u32 = 16;
const H: u32 = 16;

fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose<f64> {
    // Rotation ≤ 0.05 rad, translation ≤ 0.15 per axis: views stay mutually
    // near-identity so no Gaussian approaches the near plane or the border.
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    let half: f64 = rng.random_range(0.0..0.025);
    let q = Vector4::new(half.cos(), axis[0] * half.sin(), axis[1] * half.sin(), axis[2] * half.sin());
    let t = Vector3::new(
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
    );
    CameraPose::new(q, t).unwrap()
}

fn build_scene(seed: u64, n_gaussians: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(
        rng.random_range(18.0..22.0),
        rng.random_range(18.0..22.0),
        rng.random_range(7.0..9.0),
        rng.random_range(7.0..9.0),
        W,
        H,
    )
    .unwrap();
    let sources = vec![random_pose(&mut rng), random_pose(&mut rng)];
    let target = random_pose(&mut rng);
    let gaussians = (0..n_gaussians)
        .map(|_| {
            // Unit-ish quaternion with a non-unit norm to exercise the
            // normalization gradient.
            let mut q = Vector4::new(
                1.0,
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            );
            q *= rng.random_range(0.9..1.1) / q.norm();
            // Degree-1 SH with the total response strictly inside (0, 1) on
            // every channel, keeping the color clamp inert under the step.
            let mut sh = vec![0.0; 12];
            for ch in 0..3 {
                sh[ch] = rng.random_range(0.25..0.7) / SH_C0;
            }
            for v in sh.iter_mut().skip(3) {
                *v = rng.random_range(-0.08..0.08);
            }
            PixelGaussian {
                d: softplus_inv(rng.random_range(1.7..2.2)),
                q,
                sh,
                scale: Vector3::new(
                    rng.random_range(0.9f64..1.2).ln(),
                    rng.random_range(0.9f64..1.2).ln(),
                    rng.random_range(0.9f64..1.2).ln(),
                ),
                opacity: logit(rng.random_range(0.45..0.9)),
                source_view: rng.random_range(0..2),
                source_pixel: {
                    let u = rng.random_range(5..11u32);
                    let v = rng.random_range(5..11u32);
                    v * W + u
                },
            }
        })
        .collect();
    let set = GaussianSet::new(gaussians, 1, 2, W, H).unwrap();
    let grad_rgb = (0..(W * H * 3) as usize)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Scene { set, sources, target, k, grad_rgb }
}

fn loss(scene: &Scene, set: &GaussianSet<f64>, sources: &[CameraPose<f64>], target: &CameraPose<f64>, k: &CameraIntrinsics<f64>) -> f64 {
    let (out, _) = render(set, sources, k, target, &RenderOptions::default()).unwrap();
    out.rgb.iter().zip(&scene.grad_rgb).map(|(a, b)| a * b).sum()
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(0.03)
}

fn check_scene<S: Scalar>(seed: u64, n_gaussians: usize, step: f64) -> Result<SceneReport, SplatError> {
    let scene = build_scene(seed, n_gaussians);

    // Analytic gradient at working precision.
    let set_s: GaussianSet<S> = scene.set.cast();
    let sources_s: Vec<CameraPose<S>> = scene.sources.iter().map(CameraPose::cast).collect();
    let target_s: CameraPose<S> = scene.target.cast();
    let k_s: CameraIntrinsics<S> = scene.k.cast();
    let grad_s: Vec<S> = scene.grad_rgb.iter().map(|&v| sf(v)).collect();
    let (_, ctx) = render(&set_s, &sources_s, &k_s, &target_s, &RenderOptions::default())?;
    let bundle = render_backward(&ctx, &grad_s, None)?;

    let mut worst = (0.0f64, String::new());
    let mut n_checked = 0usize;
    let note = |err: f64, name: String, worst: &mut (f64, String)| {
        if err > worst.0 {
            *worst = (err, name);
        }
    };

    let fd_param = |mutate: &dyn Fn(&mut GaussianSet<f64>, f64)| -> f64 {
        let mut plus = scene.set.clone();
        mutate(&mut plus, step);
        let mut minus = scene.set.clone();
        mutate(&mut minus, -step);
        (loss(&scene, &plus, &scene.sources, &scene.target, &scene.k)
            - loss(&scene, &minus, &scene.sources, &scene.target, &scene.k))
            / (2.0 * step)
    };

    let coeffs = scene.set.sh_coeffs();
    for i in 0..scene.set.len() {
        let fd = fd_param(&|s, h| s.gaussians[i].d += h);
        note(rel_err(bundle.d[i], fd), format!("gaussian {i} d"), &mut worst);
        n_checked += 1;
        for a in 0..4 {
            let fd = fd_param(&|s, h| s.gaussians[i].q[a] += h);
            note(rel_err(bundle.q[i * 4 + a], fd), format!("gaussian {i} q[{a}]"), &mut worst);
            n_checked += 1;
        }
        for a in 0..coeffs * 3 {
            let fd = fd_param(&|s, h| s.gaussians[i].sh[a] += h);
            note(rel_err(bundle.sh[i * coeffs * 3 + a], fd), format!("gaussian {i} sh[{a}]"), &mut worst);
            n_checked += 1;
        }
        for a in 0..3 {
            let fd = fd_param(&|s, h| s.gaussians[i].scale[a] += h);
            note(rel_err(bundle.scale[i * 3 + a], fd), format!("gaussian {i} scale[{a}]"), &mut worst);
            n_checked += 1;
        }
        let fd = fd_param(&|s, h| s.gaussians[i].opacity += h);
        note(rel_err(bundle.opacity[i], fd), format!("gaussian {i} opacity"), &mut worst);
        n_checked += 1;
    }

    // Extrinsics: both-sided retractions along each tangent direction.
    let fd_pose = |which: Option<usize>, dir: usize| -> f64 {
        let mut xi = [0.0; 6];
        xi[dir] = step;
        let mut xim = [0.0; 6];
        xim[dir] = -step;
        let (mut sp, mut sm) = (scene.sources.clone(), scene.sources.clone());
        let (mut tp, mut tm) = (scene.target, scene.target);
        match which {
            Some(v) => {
                sp[v] = sp[v].retract(&xi);
                sm[v] = sm[v].retract(&xim);
            }
            None => {
                tp = tp.retract(&xi);
                tm = tm.retract(&xim);
            }
        }
        (loss(&scene, &scene.set, &sp, &tp, &scene.k)
            - loss(&scene, &scene.set, &sm, &tm, &scene.k))
            / (2.0 * step)
    };
    for v in 0..scene.sources.len() {
        for dir in 0..6 {
            let fd = fd_pose(Some(v), dir);
            note(rel_err(bundle.source_poses[v][dir], fd), format!("source {v} xi[{dir}]"), &mut worst);
            n_checked += 1;
        }
    }
    for dir in 0..6 {
        let fd = fd_pose(None, dir);
        note(rel_err(bundle.target_pose[dir], fd), format!("target xi[{dir}]"), &mut worst);
        n_checked += 1;
    }

    // Shared intrinsics.
    for (a, name) in ["fx", "fy", "cx", "cy"].iter().enumerate() {
        let perturb = |h: f64| {
            let mut k = scene.k;
            match a {
                0 => k.fx += h,
                1 => k.fy += h,
                2 => k.cx += h,
                _ => k.cy += h,
            }
            loss(&scene, &scene.set, &scene.sources, &scene.target, &k)
        };
        let fd = (perturb(step) - perturb(-step)) / (2.0 * step);
        note(rel_err(bundle.intrinsics[a], fd), (*name).to_string(), &mut worst);
        n_checked += 1;
    }

    Ok(SceneReport { seed, n_checked, max_rel_err: worst.0, worst: worst.1 })
}

/// Sweeps randomized scenes comparing the analytic bundle against central
/// finite differences of the forward render.
pub fn run_gradcheck<S: Scalar>(cfg: &GradcheckConfig) -> Result<GradcheckReport, SplatError> {
    let tol = cfg.tol.unwrap_or(if S::NAME == "f32" { 1e-3 } else { 1e-5 });
    let scenes: Vec<SceneReport> = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| check_scene::<S>(cfg.seed.wrapping_add(i as u64), cfg.n_gaussians, cfg.step))
        .collect::<Result<_, _>>()?;
    let (mut max_rel_err, mut worst, mut n_checked) = (0.0f64, String::new(), 0usize);
    for s in &scenes {
        n_checked += s.n_checked;
        if s.max_rel_err > max_rel_err {
            max_rel_err = s.max_rel_err;
            worst = format!("scene {}: {}", s.seed, s.worst);
        }
    }
    Ok(GradcheckReport {
        precision: S::NAME,
        tol,
        step: cfg.step,
        n_scenes: cfg.n_scenes,
        n_checked,
        max_rel_err,
        worst,
        passed: max_rel_err < tol,
        scenes,
    })
}
