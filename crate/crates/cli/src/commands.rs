//! Subcommand implementations: argument structs, file plumbing, dispatch
//! over the requested precision.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use splatcal::curriculum::{
    default_grid, label_profile, ExternalOverlap, GeometricOverlap, OverlapProfile,
    OverlapProvider, SemanticOverlap,
};
use splatcal::evalmetrics::{depth_metrics, rpa, DepthMetrics, PoseSet};
use splatcal::geometry::{CameraPose, IntrinsicsJson, PoseJson};
use splatcal::photometric::{psnr, Image};
use splatcal::scalar::{sf, Scalar};
use splatcal::selfcal::{fit as selfcal_fit, CurriculumMode, FitConfig, FitResult};
use splatcal::splat::{
    load_checkpoint, render as splat_render, run_gradcheck, save_checkpoint, GradcheckConfig,
    RenderOptions,
};
use splatcal::synthscene::{
    gen_scene as synth_gen, load_sequence, render_dataset, write_depth, write_png, SceneConfig,
};

use crate::{Globals, Precision};

/// Error carrying its process exit code: 1 usage, 2 runtime.
pub struct CliError {
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { message: msg.into(), code: 1 }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self { message: msg.into(), code: 2 }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::runtime(e.to_string())
    }
}

/// Camera list interchange format: `fit` writes it, render/eval read it.
/// `frames` defaults to 0..n so ground-truth camera files parse too.
#[derive(Debug, Serialize, Deserialize)]
struct CamerasJson {
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intrinsics: Option<IntrinsicsJson>,
    poses: Vec<PoseJson>,
}

impl CamerasJson {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        let cams: CamerasJson = serde_json::from_str(&text)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        if let Some(frames) = &cams.frames {
            if frames.len() != cams.poses.len() {
                return Err(CliError::runtime(format!(
                    "{}: {} frames for {} poses",
                    path.display(),
                    frames.len(),
                    cams.poses.len()
                )));
            }
        }
        Ok(cams)
    }

    fn frames(&self) -> Vec<usize> {
        self.frames.clone().unwrap_or_else(|| (0..self.poses.len()).collect())
    }

    fn poses_as<S: Scalar>(&self) -> Result<Vec<CameraPose<S>>, CliError> {
        self.poses.iter().map(|p| p.to_pose().map_err(CliError::from)).collect()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::from)?;
    fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Print machine output to stdout and, when --out names a file, there too.
fn emit(value: &impl Serialize, out: Option<&PathBuf>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::from)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn parse_csv<T>(text: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T: std::str::FromStr,
    T::Err: Display,
{
    text.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| CliError::usage(format!("bad {what} entry {s:?}: {e}"))))
        .collect()
}

/// Frame selection: `--frames` CSV filtered against what is available.
fn select_frames(available: &[usize], wanted: &Option<String>) -> Result<Vec<usize>, CliError> {
    match wanted {
        None => Ok(available.to_vec()),
        Some(csv) => {
            let req: Vec<usize> = parse_csv(csv, "frame")?;
            for f in &req {
                if !available.contains(f) {
                    return Err(CliError::runtime(format!("frame {f} has no camera")));
                }
            }
            Ok(req)
        }
    }
}

// --- gen-scene ---------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenSceneArgs {
    /// Scene preset: box, textured-plane, or cluster.
    #[arg(long, default_value = "box")]
    preset: String,
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 64)]
    height: u32,
    /// Orbit span of the camera trajectory in degrees.
    #[arg(long, default_value_t = 60.0)]
    orbit_deg: f64,
}

#[derive(Serialize)]
struct GenSceneReport<'a> {
    out_dir: &'a Path,
    preset: &'a str,
    frames: usize,
    width: u32,
    height: u32,
    seed: u64,
}

pub fn gen_scene(args: &GenSceneArgs, globals: &Globals) -> Result<(), CliError> {
    let out = globals.out_required()?.clone();
    let cfg = SceneConfig {
        preset: args.preset.clone(),
        n_views: args.views,
        width: args.width,
        height: args.height,
        orbit_deg: args.orbit_deg,
        seed: globals.seed(),
    };
    let scene = synth_gen(&cfg)?;
    let seq = render_dataset(&scene, &out)?;
    log::info!("wrote {} frames to {}", seq.len(), out.display());
    let report = GenSceneReport {
        out_dir: &out,
        preset: &args.preset,
        frames: seq.len(),
        width: seq.width,
        height: seq.height,
        seed: cfg.seed,
    };
    let text = serde_json::to_string_pretty(&report).map_err(CliError::from)?;
    println!("{text}");
    Ok(())
}

// --- label-overlap -----------------------------------------------------

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ProviderArg {
    Semantic,
    Geometric,
    External,
}

#[derive(Args, Debug)]
pub struct LabelOverlapArgs {
    /// Sequence directory (frames plus optional manifest).
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, value_enum, default_value_t = ProviderArg::Semantic)]
    provider: ProviderArg,
    /// Embedding sidecar for the external provider.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Comma-separated frame spacings; defaults to a dyadic grid.
    #[arg(long)]
    spacings: Option<String>,
    /// Triplets sampled per spacing.
    #[arg(long, default_value_t = 32)]
    triplets: u32,
}

pub fn label_overlap(args: &LabelOverlapArgs, globals: &Globals) -> Result<(), CliError> {
    let seq = load_sequence(&args.seq)?;
    let provider: Box<dyn OverlapProvider> = match args.provider {
        ProviderArg::Semantic => Box::new(SemanticOverlap),
        ProviderArg::Geometric => Box::new(GeometricOverlap),
        ProviderArg::External => {
            let path = args.embeddings.as_ref().ok_or_else(|| {
                CliError::usage("--provider external requires --embeddings")
            })?;
            Box::new(ExternalOverlap::from_sidecar("external", path)?)
        }
    };
    let spacings = match &args.spacings {
        Some(csv) => parse_csv(csv, "spacing")?,
        None => default_grid(seq.len()),
    };
    let profile = label_profile(&seq, provider.as_ref(), &spacings, args.triplets, globals.seed())?;
    emit(&profile, globals.out.as_ref())
}

// --- fit ---------------------------------------------------------------

#[derive(ValueEnum, Debug, Clone, Copy)]
enum CurriculumArg {
    None,
    Geometric,
    Semantic,
}

impl From<CurriculumArg> for CurriculumMode {
    fn from(c: CurriculumArg) -> Self {
        match c {
            CurriculumArg::None => CurriculumMode::None,
            CurriculumArg::Geometric => CurriculumMode::Geometric,
            CurriculumArg::Semantic => CurriculumMode::Semantic,
        }
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Sequence directory.
    #[arg(long)]
    seq: PathBuf,
    /// FitConfig as TOML or JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overlap profile JSON (required by curricula).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Initial cameras keyed by frame (fitted_cameras.json shape).
    #[arg(long)]
    init_cameras: Option<PathBuf>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    k_ref: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    steps_per_window: Option<usize>,
    #[arg(long)]
    lr_gaussians: Option<f64>,
    #[arg(long)]
    lr_extrinsics: Option<f64>,
    #[arg(long)]
    lr_intrinsics: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    skip_norm: Option<f64>,
    #[arg(long, value_enum)]
    curriculum: Option<CurriculumArg>,
    #[arg(long)]
    warm_fraction: Option<f64>,
    #[arg(long)]
    init_depth: Option<f64>,
    #[arg(long)]
    sh_degree: Option<u32>,
    #[arg(long)]
    warm_start: Option<bool>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

fn load_config(path: &Path) -> Result<FitConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }
}

fn resolve_config(args: &FitArgs, globals: &Globals) -> Result<FitConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => FitConfig::default(),
    };
    macro_rules! adopt {
        ($($field:ident),+) => {
            $(if let Some(v) = args.$field { cfg.$field = v; })+
        };
    }
    adopt!(
        views, k_ref, lambda, windows, steps_per_window, lr_gaussians, lr_extrinsics,
        lr_intrinsics, beta1, beta2, clip_norm, skip_norm, warm_fraction, init_depth,
        sh_degree, warm_start, width, height
    );
    if let Some(c) = args.curriculum {
        cfg.curriculum = c.into();
    }
    if let Some(seed) = globals.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct FitReport<'a> {
    config: &'a FitConfig,
    steps: usize,
    skipped: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
}

fn run_fit<S: Scalar>(args: &FitArgs, globals: &Globals, cfg: &FitConfig) -> Result<(), CliError> {
    let out = globals.out_required()?.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    let seq = load_sequence(&args.seq)?;
    let profile = match &args.profile {
        Some(path) => Some(OverlapProfile::load(path)?),
        None => None,
    };
    let init: Option<Vec<(usize, CameraPose<S>)>> = match &args.init_cameras {
        Some(path) => {
            let cams = CamerasJson::load(path)?;
            let poses = cams.poses_as::<S>()?;
            Some(cams.frames().into_iter().zip(poses).collect())
        }
        None => None,
    };

    let result: FitResult<S> = selfcal_fit(&seq, profile.as_ref(), cfg, init.as_deref())?;
    log::info!(
        "fit: {} steps over {} windows in {:.1}s",
        result.loss_history.len(),
        cfg.windows,
        result.wall_secs
    );

    let state = &result.state;
    let src_poses: Vec<CameraPose<S>> = state.ref_pos.iter().map(|&p| state.poses[p]).collect();
    save_checkpoint(&out.join("checkpoint.splc"), &state.set, &state.intrinsics, &src_poses)?;

    let cameras = CamerasJson {
        frames: Some(result.poses_by_frame.iter().map(|(f, _)| *f).collect()),
        intrinsics: Some(IntrinsicsJson::from_intrinsics(&state.intrinsics)),
        poses: result.poses_by_frame.iter().map(|(_, p)| PoseJson::from_pose(p)).collect(),
    };
    write_json(&out.join("fitted_cameras.json"), &cameras)?;

    let mut csv = String::from("step,window,loss,grad_norm,skipped\n");
    for d in &result.diagnostics {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            d.step, d.window, d.loss, d.grad_norm, d.skipped as u8
        ));
    }
    let csv_path = out.join("loss_history.csv");
    fs::write(&csv_path, csv).map_err(|e| CliError::runtime(format!("{}: {e}", csv_path.display())))?;

    let report = FitReport {
        config: cfg,
        steps: result.loss_history.len(),
        skipped: result.diagnostics.iter().filter(|d| d.skipped).count(),
        first_loss: result.loss_history.first().copied(),
        final_loss: result.loss_history.last().copied(),
    };
    write_json(&out.join("fit_report.json"), &report)?;
    let text = serde_json::to_string_pretty(&report).map_err(CliError::from)?;
    println!("{text}");
    Ok(())
}

pub fn fit(args: &FitArgs, globals: &Globals) -> Result<(), CliError> {
    let cfg = resolve_config(args, globals)?;
    match globals.precision {
        Precision::F32 => run_fit::<f32>(args, globals, &cfg),
        Precision::F64 => run_fit::<f64>(args, globals, &cfg),
    }
}

// --- render ------------------------------------------------------------

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Checkpoint written by fit.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cameras to render from; defaults to the checkpoint's source cameras.
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Also write depth maps next to the PNGs.
    #[arg(long)]
    depth: bool,
}

#[derive(Serialize)]
struct RenderReport<'a> {
    out_dir: &'a Path,
    frames: Vec<usize>,
}

fn run_render<S: Scalar>(args: &RenderArgs, globals: &Globals) -> Result<(), CliError> {
    let out = globals.out_required()?.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let set = ckpt.set.cast::<S>();
    let k = ckpt.intrinsics.cast::<S>();
    let sources: Vec<CameraPose<S>> = ckpt.poses.iter().map(|p| p.cast::<S>()).collect();
    let (frames, targets): (Vec<usize>, Vec<CameraPose<S>>) = match &args.cameras {
        Some(path) => {
            let cams = CamerasJson::load(path)?;
            (cams.frames(), cams.poses_as::<S>()?)
        }
        None => ((0..sources.len()).collect(), sources.clone()),
    };

    let opts = RenderOptions::default();
    for (f, pose) in frames.iter().zip(&targets) {
        let (img, _) = splat_render(&set, &sources, &k, pose, &opts)?;
        let rgb: Vec<f64> = img.rgb.iter().map(|v| v.to_f64()).collect();
        write_png(&out.join(format!("render_{f:05}.png")), img.width, img.height, &rgb)?;
        if args.depth {
            let depth: Vec<f32> = img.depth.iter().map(|v| v.to_f64() as f32).collect();
            write_depth(&out.join(format!("depth_{f:05}.bin")), img.height, img.width, &depth)?;
        }
    }
    log::info!("rendered {} views to {}", frames.len(), out.display());
    let report = RenderReport { out_dir: &out, frames };
    let text = serde_json::to_string_pretty(&report).map_err(CliError::from)?;
    println!("{text}");
    Ok(())
}

pub fn render(args: &RenderArgs, globals: &Globals) -> Result<(), CliError> {
    match globals.precision {
        Precision::F32 => run_render::<f32>(args, globals),
        Precision::F64 => run_render::<f64>(args, globals),
    }
}

// --- eval-pose ---------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalPoseArgs {
    /// Predicted cameras (fitted_cameras.json shape).
    #[arg(long)]
    pred: PathBuf,
    /// Sequence directory holding ground-truth cameras.
    #[arg(long)]
    seq: PathBuf,
    /// Comma-separated thresholds in degrees.
    #[arg(long, default_value = "5,15,30")]
    thresholds: String,
}

pub fn eval_pose(args: &EvalPoseArgs, globals: &Globals) -> Result<(), CliError> {
    let cams = CamerasJson::load(&args.pred)?;
    let frames = cams.frames();
    let pred_poses = cams.poses_as::<f64>()?;
    let seq = load_sequence(&args.seq)?;
    let gt = seq
        .gt
        .as_ref()
        .ok_or_else(|| CliError::runtime("sequence has no ground-truth cameras"))?;
    let gt_poses: Vec<CameraPose<f64>> = frames
        .iter()
        .map(|&f| {
            gt.poses
                .get(f)
                .copied()
                .ok_or_else(|| CliError::runtime(format!("frame {f} outside ground truth")))
        })
        .collect::<Result<_, _>>()?;
    let thresholds: Vec<f64> = parse_csv(&args.thresholds, "threshold")?;
    let pred = PoseSet::new(frames.clone(), pred_poses)?;
    let gt_set = PoseSet::new(frames, gt_poses)?;
    let report = rpa(&pred, &gt_set, &thresholds)?;
    emit(&report, globals.out.as_ref())
}

// --- eval-nvs ----------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalNvsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fitted cameras keyed by frame.
    #[arg(long)]
    cameras: PathBuf,
    /// Sequence directory with the frames to compare against.
    #[arg(long)]
    seq: PathBuf,
    /// Comma-separated frame subset; defaults to every camera.
    #[arg(long)]
    frames: Option<String>,
}

#[derive(Serialize)]
struct FramePsnr {
    frame: usize,
    psnr_db: f64,
}

#[derive(Serialize)]
struct NvsReport {
    per_frame: Vec<FramePsnr>,
    mean_psnr_db: f64,
}

fn run_eval_nvs<S: Scalar>(args: &EvalNvsArgs, globals: &Globals) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let set = ckpt.set.cast::<S>();
    let k = ckpt.intrinsics.cast::<S>();
    let sources: Vec<CameraPose<S>> = ckpt.poses.iter().map(|p| p.cast::<S>()).collect();
    let seq = load_sequence(&args.seq)?;
    let cams = CamerasJson::load(&args.cameras)?;
    let frames = cams.frames();
    let poses = cams.poses_as::<S>()?;
    let chosen = select_frames(&frames, &args.frames)?;

    let opts = RenderOptions::default();
    let mut per_frame = Vec::with_capacity(chosen.len());
    for &f in &chosen {
        if f >= seq.len() {
            return Err(CliError::runtime(format!("frame {f} outside the sequence")));
        }
        let pose = poses[frames.iter().position(|&g| g == f).expect("selected")];
        let (img, _) = splat_render(&set, &sources, &k, &pose, &opts)?;
        let pred = Image::new(img.width, img.height, img.rgb)?;
        let data: Vec<S> = seq.frame(f).iter().map(|&v| sf(v as f64)).collect();
        let target = Image::new(seq.width, seq.height, data)?;
        let db = psnr(&pred, &target)?.to_f64();
        per_frame.push(FramePsnr { frame: f, psnr_db: db });
    }
    let mean = per_frame.iter().map(|p| p.psnr_db).sum::<f64>() / per_frame.len().max(1) as f64;
    let report = NvsReport { per_frame, mean_psnr_db: mean };
    emit(&report, globals.out.as_ref())
}

pub fn eval_nvs(args: &EvalNvsArgs, globals: &Globals) -> Result<(), CliError> {
    match globals.precision {
        Precision::F32 => run_eval_nvs::<f32>(args, globals),
        Precision::F64 => run_eval_nvs::<f64>(args, globals),
    }
}

// --- eval-depth --------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalDepthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// Sequence directory holding ground-truth depth maps.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    frames: Option<String>,
    /// Minimum rendered alpha for a pixel to count.
    #[arg(long, default_value_t = 0.5)]
    min_alpha: f64,
}

#[derive(Serialize)]
struct FrameDepth {
    frame: usize,
    #[serde(flatten)]
    metrics: DepthMetrics,
}

#[derive(Serialize)]
struct DepthReport {
    per_frame: Vec<FrameDepth>,
    mean_absrel: f64,
    mean_delta125: f64,
}

pub fn eval_depth(args: &EvalDepthArgs, globals: &Globals) -> Result<(), CliError> {
    // Depth comparisons always run the renderer at f64.
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let set = ckpt.set.cast::<f64>();
    let sources = ckpt.poses.clone();
    let seq = load_sequence(&args.seq)?;
    let gt = seq
        .gt
        .as_ref()
        .filter(|g| !g.depths.is_empty())
        .ok_or_else(|| CliError::runtime("sequence has no ground-truth depth"))?;
    let cams = CamerasJson::load(&args.cameras)?;
    let frames = cams.frames();
    let poses = cams.poses_as::<f64>()?;
    let chosen = select_frames(&frames, &args.frames)?;

    let opts = RenderOptions::default();
    let mut per_frame = Vec::with_capacity(chosen.len());
    for &f in &chosen {
        if f >= gt.depths.len() {
            return Err(CliError::runtime(format!("frame {f} has no ground-truth depth")));
        }
        let pose = poses[frames.iter().position(|&g| g == f).expect("selected")];
        let (img, _) = splat_render(&set, &sources, &ckpt.intrinsics, &pose, &opts)?;
        let gt_depth: Vec<f64> = gt.depths[f].iter().map(|&v| v as f64).collect();
        let mask: Vec<bool> = img
            .alpha
            .iter()
            .zip(&gt_depth)
            .map(|(&a, &g)| a >= args.min_alpha && g > 0.0)
            .collect();
        let metrics = depth_metrics(&img.depth, &gt_depth, &mask)?;
        per_frame.push(FrameDepth { frame: f, metrics });
    }
    let n = per_frame.len().max(1) as f64;
    let report = DepthReport {
        mean_absrel: per_frame.iter().map(|p| p.metrics.absrel).sum::<f64>() / n,
        mean_delta125: per_frame.iter().map(|p| p.metrics.delta125).sum::<f64>() / n,
        per_frame,
    };
    emit(&report, globals.out.as_ref())
}

// --- gradcheck ---------------------------------------------------------

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 8)]
    gaussians: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Relative-error tolerance; defaults per precision.
    #[arg(long)]
    tol: Option<f64>,
}

pub fn gradcheck(args: &GradcheckArgs, globals: &Globals) -> Result<(), CliError> {
    let cfg = GradcheckConfig {
        n_scenes: args.scenes,
        n_gaussians: args.gaussians,
        seed: globals.seed(),
        step: args.eps,
        tol: args.tol,
    };
    let report = match globals.precision {
        Precision::F32 => run_gradcheck::<f32>(&cfg)?,
        Precision::F64 => run_gradcheck::<f64>(&cfg)?,
    };
    emit(&report, globals.out.as_ref())?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradcheck failed: max relative error {:.3e} ({}) exceeds {:.1e}",
            report.max_rel_err, report.worst, report.tol
        )))
    }
}
