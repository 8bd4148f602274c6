//! Synthetic ground-truth scenes and sequence I/O.
//!
//! Scenes are authored sets of world-space Gaussians with smooth orbit
//! trajectories, rendered to disk as PNG frames plus an eval-only sidecar of
//! exact cameras and depth maps. The fit pipeline consumes only the frames;
//! the sidecar exists for overlap labeling and metrics, and must never feed
//! the optimizer.
//!
//! On-disk layout: `frame_%05d.png` (8-bit, linear v/255), `depth_%05d.bin`
//! (magic `DPTH`, u32 height, u32 width, f32 row-major, little-endian),
//! `gt_cameras.json`, and `manifest.json` tying them together.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::geometry::{
    rot_to_quat, CameraIntrinsics, CameraPose, IntrinsicsJson, PoseJson,
};
use crate::splat::{render_world, RenderOptions, WorldGaussian, SH_C0};

/// Horizontal field of view of generated cameras, degrees.
/// 2·atan(1/2): the preset focal length equals the image width, a natural
/// default for a camera model initialized from image size alone.
const PRESET_FOV_DEG: f64 = 53.13010235415598;

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config error: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Splat(#[from] crate::splat::SplatError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

/// Parameters of a generated scene.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub preset: String,
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    /// Total angular span of the orbit trajectory, degrees.
    pub orbit_deg: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            preset: "box".into(),
            n_views: 10,
            width: 64,
            height: 64,
            orbit_deg: 60.0,
            seed: 0,
        }
    }
}

/// Authored Gaussians, exact intrinsics, and an orbit trajectory.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub gaussians: Vec<WorldGaussian<f64>>,
    pub intrinsics: CameraIntrinsics<f64>,
    pub trajectory: Vec<CameraPose<f64>>,
    pub preset: String,
    pub seed: u64,
}

/// Evaluation-only sidecar. Labeling and metrics may read it; `fit` never
/// sees it.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub intrinsics: CameraIntrinsics<f64>,
    pub poses: Vec<CameraPose<f64>>,
    /// One H·W row-major map per frame; 0 where nothing was hit.
    pub depths: Vec<Vec<f32>>,
}

/// An ordered list of frames, loaded into memory, plus optional ground truth.
#[derive(Debug, Clone)]
pub struct SceneSequence {
    pub dir: PathBuf,
    pub width: u32,
    pub height: u32,
    /// H·W·3 row-major RGB in [0,1], one per frame.
    pub frames: Vec<Vec<f32>>,
    pub frame_files: Vec<String>,
    pub gt: Option<GroundTruth>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i]
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    frames: Vec<String>,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_cameras: Option<String>,
    /// Filename template, `%05d` replaced by the frame index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct GtCamerasJson {
    intrinsics: IntrinsicsJson,
    poses: Vec<PoseJson>,
}

/// World-to-camera pose at `center` looking toward `target`, y-ish up.
fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> CameraPose<f64> {
    let fwd = (target - center).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let right = up.cross(&fwd).normalize();
    let down = fwd.cross(&right); // camera +y points down the image
    let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
    let quat = rot_to_quat(&rot);
    let trans = -(rot * center);
    CameraPose::new(quat, trans).expect("look_at built a unit quaternion")
}

/// Cameras on an arc about `target`, facing it. Nonzero `radial_amp` and
/// `vert_amp` modulate orbit radius and height per view: a constant-radius
/// coplanar orbit is a critical configuration for self-calibration (focal
/// length trades off against camera distance), so presets meant for joint
/// pose+intrinsics fitting break it deliberately.
fn orbit_trajectory(
    radius: f64,
    target: Vector3<f64>,
    n_views: usize,
    span_deg: f64,
    radial_amp: f64,
    vert_amp: f64,
) -> Vec<CameraPose<f64>> {
    let span = span_deg.to_radians();
    let step = if n_views > 1 { span / (n_views - 1) as f64 } else { 0.0 };
    let start = -0.5 * span;
    // Irrational phase steps keep the radius/height wobble aperiodic in k.
    let golden = 2.399963229728653;
    (0..n_views)
        .map(|k| {
            let phi = start + k as f64 * step;
            let r = radius * (1.0 + radial_amp * (golden * k as f64).sin());
            let y = vert_amp * (1.3 * k as f64 + 0.7).sin();
            let c = target + Vector3::new(r * phi.sin(), y, -r * phi.cos());
            look_at(&c, &target)
        })
        .collect()
}

fn dc_gaussian(
    mean: Vector3<f64>,
    quat: Vector4<f64>,
    scale: Vector3<f64>,
    rgb: [f64; 3],
    opacity: f64,
) -> WorldGaussian<f64> {
    WorldGaussian {
        mean,
        quat,
        scale,
        sh: rgb.iter().map(|c| c / SH_C0).collect(),
        opacity,
    }
}

/// Center of the box room; cameras orbit outside its open face. Keeping the
/// walls well in front of every camera avoids grazing near-plane splats,
/// whose EWA footprints degenerate.
const BOX_CENTER_Z: f64 = 2.5;

/// An open-faced room of five textured walls, viewed from outside through
/// the missing face; the ceiling is deliberately flat-colored to keep one
/// low-texture region in every sequence.
fn box_gaussians(rng: &mut StdRng) -> Vec<WorldGaussian<f64>> {
    let per_side = 18usize;
    let spacing = 2.0 / per_side as f64;
    let sig_t = spacing * 0.6;
    let sig_n = spacing * 0.15;
    // (axis, offset from center, base color, texture amplitude); per-cell
    // colors are randomized around the base so the walls carry aperiodic
    // texture — a periodic pattern would hand photometric alignment a
    // lattice of wrong-lock minima one cell apart. The front face (z toward
    // the cameras) is omitted, and zero amplitude keeps the +y wall flat.
    let walls: [(usize, f64, [f64; 3], f64); 5] = [
        (0, 1.0, [0.75, 0.4, 0.3], 0.35),
        (0, -1.0, [0.35, 0.5, 0.75], 0.35),
        (1, 1.0, [0.55, 0.52, 0.5], 0.0),
        (1, -1.0, [0.35, 0.6, 0.35], 0.35),
        (2, 1.0, [0.6, 0.45, 0.35], 0.35),
    ];
    let center = Vector3::new(0.0, 0.0, BOX_CENTER_Z);
    let mut out = Vec::with_capacity(walls.len() * per_side * per_side + 400);
    for (axis, sign, base, amp) in walls {
        let (ta, tb) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut scale = Vector3::from_element(sig_t);
        scale[axis] = sig_n;
        for i in 0..per_side {
            for j in 0..per_side {
                let jit = |r: &mut StdRng| r.random_range(-0.15..0.15) * spacing;
                let mut mean = center;
                mean[axis] += sign;
                mean[ta] += -1.0 + (i as f64 + 0.5) * spacing + jit(rng);
                mean[tb] += -1.0 + (j as f64 + 0.5) * spacing + jit(rng);
                let rgb = std::array::from_fn(|c| {
                    (base[c] + rng.random_range(-amp..=amp)).clamp(0.05, 0.95)
                });
                out.push(dc_gaussian(
                    mean,
                    Vector4::new(1.0, 0.0, 0.0, 0.0),
                    scale,
                    rgb,
                    0.92,
                ));
            }
        }
    }
    // Free-standing pillars at staggered depths. Interior structure creates
    // parallax and occlusion edges that a wall-only room lacks; without
    // them, small camera errors are absorbable by wall appearance alone.
    let pillars: [(f64, f64, [f64; 3]); 6] = [
        (-0.62, -0.55, [0.85, 0.25, 0.2]),
        (0.55, -0.30, [0.2, 0.35, 0.8]),
        (-0.18, 0.05, [0.9, 0.75, 0.2]),
        (0.66, 0.42, [0.15, 0.65, 0.3]),
        (0.05, -0.72, [0.75, 0.3, 0.7]),
        (-0.58, 0.58, [0.2, 0.7, 0.7]),
    ];
    let beads = 14usize;
    let bead_gap = 2.0 / beads as f64;
    for (px, pz, base) in pillars {
        for b in 0..beads {
            let y = -1.0 + (b as f64 + 0.5) * bead_gap;
            let jit = |r: &mut StdRng| r.random_range(-0.2..0.2) * bead_gap;
            let mean = center + Vector3::new(px + jit(rng), y, pz + jit(rng));
            let rgb = std::array::from_fn(|c| {
                (base[c] + rng.random_range(-0.25..=0.25)).clamp(0.05, 0.95)
            });
            out.push(dc_gaussian(
                mean,
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                Vector3::new(0.07, bead_gap * 0.6, 0.07),
                rgb,
                0.92,
            ));
        }
    }
    out
}

/// A single smoothly textured plane facing the cameras.
fn plane_gaussians(rng: &mut StdRng) -> Vec<WorldGaussian<f64>> {
    let per_side = 40usize;
    let spacing = 4.0 / per_side as f64;
    let scale = Vector3::new(spacing * 0.6, spacing * 0.6, spacing * 0.15);
    let mut out = Vec::with_capacity(per_side * per_side);
    for i in 0..per_side {
        for j in 0..per_side {
            let jit = |r: &mut StdRng| r.random_range(-0.15..0.15) * spacing;
            let u = -2.0 + (i as f64 + 0.5) * spacing + jit(rng);
            let v = -2.0 + (j as f64 + 0.5) * spacing + jit(rng);
            let rgb = [
                0.5 + 0.4 * (3.1 * u + 1.7 * v).sin(),
                0.5 + 0.4 * (2.3 * u - 2.9 * v + 1.0).sin(),
                0.5 + 0.4 * (1.3 * u + 3.7 * v - 0.5).cos(),
            ];
            out.push(dc_gaussian(
                Vector3::new(u, v, 2.5),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                scale,
                rgb,
                0.92,
            ));
        }
    }
    out
}

/// 500 random anisotropic blobs inside the unit ball.
fn cluster_gaussians(rng: &mut StdRng) -> Vec<WorldGaussian<f64>> {
    let mut out = Vec::with_capacity(500);
    while out.len() < 500 {
        let mean = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if mean.norm() > 1.0 {
            continue;
        }
        let quat = loop {
            let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if q.norm() > 0.1 {
                break q;
            }
        };
        let scale = Vector3::from_fn(|_, _| rng.random_range(0.02..0.08));
        let rgb = [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ];
        let opacity = rng.random_range(0.5..0.95);
        out.push(dc_gaussian(mean, quat, scale, rgb, opacity));
    }
    out
}

/// Generate a preset scene: authored Gaussians plus a uniform-step orbit.
pub fn gen_scene(cfg: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    if cfg.n_views < 2 {
        return Err(SynthError::Config(format!(
            "need at least 2 views, got {}",
            cfg.n_views
        )));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let (gaussians, orbit_radius, target, radial_amp, vert_amp) = match cfg.preset.as_str() {
        "box" => (
            box_gaussians(&mut rng),
            BOX_CENTER_Z,
            Vector3::new(0.0, 0.0, BOX_CENTER_Z),
            0.18,
            0.3,
        ),
        "textured-plane" => {
            (plane_gaussians(&mut rng), 2.5, Vector3::new(0.0, 0.0, 2.5), 0.0, 0.0)
        }
        "cluster" => (cluster_gaussians(&mut rng), 3.0, Vector3::zeros(), 0.0, 0.0),
        other => {
            return Err(SynthError::Config(format!("unknown preset `{other}`")));
        }
    };
    let f = 0.5 * cfg.width as f64 / (0.5 * PRESET_FOV_DEG.to_radians()).tan();
    let intrinsics = CameraIntrinsics::new(
        f,
        f,
        cfg.width as f64 * 0.5,
        cfg.height as f64 * 0.5,
        cfg.width,
        cfg.height,
    )
    .map_err(|e| SynthError::Config(e.to_string()))?;
    let trajectory = orbit_trajectory(
        orbit_radius,
        target,
        cfg.n_views,
        cfg.orbit_deg,
        radial_amp,
        vert_amp,
    );

    let scene = SyntheticScene {
        gaussians,
        intrinsics,
        trajectory,
        preset: cfg.preset.clone(),
        seed: cfg.seed,
    };
    for (k, pose) in scene.trajectory.iter().enumerate() {
        if !scene.pose_sees_scene(pose) {
            return Err(SynthError::Config(format!(
                "trajectory pose {k} sees no Gaussian in-frustum"
            )));
        }
    }
    Ok(scene)
}

impl SyntheticScene {
    fn pose_sees_scene(&self, pose: &CameraPose<f64>) -> bool {
        let k = &self.intrinsics;
        self.gaussians.iter().any(|g| {
            let c = pose.transform_point(&g.mean);
            if c.z <= 0.01 {
                return false;
            }
            let u = k.fx * c.x / c.z + k.cx;
            let v = k.fy * c.y / c.z + k.cy;
            (0.0..k.width as f64).contains(&u) && (0.0..k.height as f64).contains(&v)
        })
    }
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

fn depth_name(i: usize) -> String {
    format!("depth_{i:05}.bin")
}

/// Write an RGB image as 8-bit PNG, values clamped from [0,1].
pub fn write_png(path: &Path, width: u32, height: u32, rgb: &[f64]) -> Result<(), SynthError> {
    if rgb.len() != (width * height * 3) as usize {
        return Err(SynthError::Image(format!(
            "{} rgb values for {width}x{height}",
            rgb.len()
        )));
    }
    let bytes: Vec<u8> = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(width, height, bytes)
        .expect("byte count checked against dimensions");
    img.save(path).map_err(|e| SynthError::Image(format!("{}: {e}", path.display())))
}

/// Write one depth map: magic, height, width, then f32 row-major.
pub fn write_depth(path: &Path, height: u32, width: u32, depth: &[f32]) -> Result<(), SynthError> {
    if depth.len() != (height * width) as usize {
        return Err(SynthError::Config(format!(
            "depth buffer holds {} values for {}x{}",
            depth.len(),
            height,
            width
        )));
    }
    let mut bytes = Vec::with_capacity(12 + depth.len() * 4);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&height.to_le_bytes());
    bytes.extend_from_slice(&width.to_le_bytes());
    for v in depth {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Read a depth map written by [`write_depth`].
pub fn read_depth(path: &Path) -> Result<(u32, u32, Vec<f32>), SynthError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fail = |why: &str| SynthError::Manifest(format!("{}: {why}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != DEPTH_MAGIC {
        return Err(fail("not a DPTH file"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let want = 12 + (h as usize) * (w as usize) * 4;
    if bytes.len() != want {
        return Err(fail("truncated depth payload"));
    }
    let depth = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, depth))
}

/// Render every trajectory view to `out_dir` and return the loaded sequence.
pub fn render_dataset(scene: &SyntheticScene, out_dir: &Path) -> Result<SceneSequence, SynthError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let opts = RenderOptions::default();
    let k = &scene.intrinsics;
    let renders: Vec<crate::splat::RenderOutput<f64>> = scene
        .trajectory
        .par_iter()
        .map(|pose| render_world(&scene.gaussians, k, pose, &opts))
        .collect::<Result<_, _>>()?;

    for (i, out) in renders.iter().enumerate() {
        write_png(&out_dir.join(frame_name(i)), k.width, k.height, &out.rgb)?;
        let depth: Vec<f32> = out.depth.iter().map(|&v| v as f32).collect();
        write_depth(&out_dir.join(depth_name(i)), k.height, k.width, &depth)?;
    }

    let cams = GtCamerasJson {
        intrinsics: IntrinsicsJson::from_intrinsics(k),
        poses: scene.trajectory.iter().map(PoseJson::from_pose).collect(),
    };
    let cam_path = out_dir.join("gt_cameras.json");
    fs::write(&cam_path, serde_json::to_vec_pretty(&cams).expect("camera json"))
        .map_err(io_err(&cam_path))?;

    let manifest = Manifest {
        frames: (0..scene.trajectory.len()).map(frame_name).collect(),
        width: k.width,
        height: k.height,
        gt_cameras: Some("gt_cameras.json".into()),
        gt_depth: Some("depth_%05d.bin".into()),
        preset: Some(scene.preset.clone()),
        seed: Some(scene.seed),
    };
    let man_path = out_dir.join("manifest.json");
    fs::write(&man_path, serde_json::to_vec_pretty(&manifest).expect("manifest json"))
        .map_err(io_err(&man_path))?;

    load_sequence(out_dir)
}

fn load_png(path: &Path, want: Option<(u32, u32)>) -> Result<(u32, u32, Vec<f32>), SynthError> {
    let img = image::open(path)
        .map_err(|e| SynthError::Image(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    if let Some((ww, wh)) = want {
        if (w, h) != (ww, wh) {
            return Err(SynthError::Manifest(format!(
                "frames: {} is {w}x{h}, expected {ww}x{wh}",
                path.display()
            )));
        }
    }
    let data = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok((w, h, data))
}

/// Load a sequence directory: with a manifest when present, otherwise any
/// directory of PNGs (sorted by name, no ground truth).
pub fn load_sequence(dir: &Path) -> Result<SceneSequence, SynthError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return load_bare_dir(dir);
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let man: Manifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Manifest(format!("manifest.json: {e}")))?;
    if man.frames.len() < 2 {
        return Err(SynthError::Manifest(format!(
            "frames: need at least 2, manifest lists {}",
            man.frames.len()
        )));
    }
    let mut frames = Vec::with_capacity(man.frames.len());
    for name in &man.frames {
        let (_, _, data) = load_png(&dir.join(name), Some((man.width, man.height)))?;
        frames.push(data);
    }

    let gt = match &man.gt_cameras {
        None => None,
        Some(cam_file) => {
            let cam_path = dir.join(cam_file);
            let text = fs::read_to_string(&cam_path).map_err(io_err(&cam_path))?;
            let cams: GtCamerasJson = serde_json::from_str(&text)
                .map_err(|e| SynthError::Manifest(format!("gt_cameras: {e}")))?;
            if cams.poses.len() != man.frames.len() {
                return Err(SynthError::Manifest(format!(
                    "gt_cameras: {} poses for {} frames",
                    cams.poses.len(),
                    man.frames.len()
                )));
            }
            let intrinsics = cams
                .intrinsics
                .to_intrinsics()
                .map_err(|e| SynthError::Manifest(format!("gt_cameras: {e}")))?;
            let poses = cams
                .poses
                .iter()
                .map(|p| p.to_pose())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| SynthError::Manifest(format!("gt_cameras: {e}")))?;
            let mut depths = Vec::new();
            if let Some(pattern) = &man.gt_depth {
                for i in 0..man.frames.len() {
                    let name = pattern.replace("%05d", &format!("{i:05}"));
                    let (h, w, d) = read_depth(&dir.join(name))?;
                    if (h, w) != (man.height, man.width) {
                        return Err(SynthError::Manifest(format!(
                            "gt_depth: map {i} is {w}x{h}, expected {}x{}",
                            man.width, man.height
                        )));
                    }
                    depths.push(d);
                }
            }
            Some(GroundTruth { intrinsics, poses, depths })
        }
    };

    Ok(SceneSequence {
        dir: dir.to_path_buf(),
        width: man.width,
        height: man.height,
        frames,
        frame_files: man.frames,
        gt,
        preset: man.preset,
        seed: man.seed,
    })
}

fn load_bare_dir(dir: &Path) -> Result<SceneSequence, SynthError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.len() < 2 {
        return Err(SynthError::Manifest(format!(
            "frames: need at least 2 PNG files in {}, found {}",
            dir.display(),
            names.len()
        )));
    }
    let (w, h, first) = load_png(&dir.join(&names[0]), None)?;
    let mut frames = vec![first];
    for name in &names[1..] {
        let (_, _, data) = load_png(&dir.join(name), Some((w, h)))?;
        frames.push(data);
    }
    Ok(SceneSequence {
        dir: dir.to_path_buf(),
        width: w,
        height: h,
        frames,
        frame_files: names,
        gt: None,
        preset: None,
        seed: None,
    })
}
