//! Visual-overlap curriculum: pairwise overlap scoring, per-sequence spacing
//! profiles, and training-time window sampling.
//!
//! A profile maps frame spacing Δt to the mean triplet overlap O_u(Δt),
//! estimated once per sequence from a small set of sampled triplets and
//! isotonized so larger spacings never claim more overlap. During training a
//! schedule anneals a target overlap from easy (o_max) to hard (o_min); the
//! profile is inverted by linear interpolation to turn that target into a
//! real-valued spacing, and windows of V frames are drawn at that spacing.
//!
//! Overlap scoring is pluggable. The built-in semantic provider is a
//! self-contained stand-in for learned embeddings (pooled luminance plus a
//! gradient-orientation histogram under cosine similarity); the geometric
//! provider measures ground-truth covisibility by depth reprojection and is
//! only available on synthetic sequences. External per-frame embeddings can
//! be loaded from a binary sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nalgebra::Vector3;

use crate::synthscene::SceneSequence;

/// Relative depth tolerance for geometric covisibility.
const DEPTH_CONSISTENCY: f64 = 0.05;

/// Pooled-luminance grid side of the built-in semantic descriptor.
const SEM_POOL: usize = 16;

/// Orientation-histogram bins of the built-in semantic descriptor.
const SEM_BINS: usize = 8;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("geometric overlap requires ground-truth poses and depth")]
    MissingGroundTruth,
    #[error("sequence too short for any requested spacing")]
    SequenceTooShort,
    #[error("overlap profile is empty")]
    EmptyProfile,
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

/// Mean triplet overlap per frame spacing, isotonized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapProfile {
    pub sequence: String,
    pub provider: String,
    pub grid: Vec<u32>,
    pub values: Vec<f64>,
    pub n_triplets: u32,
    pub seed: u64,
}

impl OverlapProfile {
    pub fn save(&self, path: &Path) -> Result<(), CurriculumError> {
        let text = serde_json::to_vec_pretty(self).expect("profile serializes");
        fs::write(path, text).map_err(|source| CurriculumError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CurriculumError> {
        let text = fs::read_to_string(path).map_err(|source| CurriculumError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let profile: Self =
            serde_json::from_str(&text).map_err(|e| CurriculumError::Parse(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    fn validate(&self) -> Result<(), CurriculumError> {
        if self.grid.len() != self.values.len() {
            return Err(CurriculumError::Parse(format!(
                "grid holds {} spacings but values holds {}",
                self.grid.len(),
                self.values.len()
            )));
        }
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(CurriculumError::Parse("grid not strictly increasing".into()));
        }
        if !self.values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(CurriculumError::Parse("values outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Anneals the target overlap from o_max down to o_min over a warm phase.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub o_min: f64,
    pub o_max: f64,
    /// Fraction of total steps spent annealing; progress holds at 1 after.
    pub warm_fraction: f64,
}

impl CurriculumSchedule {
    pub fn new(o_min: f64, o_max: f64, warm_fraction: f64) -> Result<Self, CurriculumError> {
        if !(0.0..=1.0).contains(&o_min) || !(o_min..=1.0).contains(&o_max) {
            return Err(CurriculumError::ShapeError(format!(
                "need 0 <= o_min <= o_max <= 1, got ({o_min}, {o_max})"
            )));
        }
        if !(warm_fraction > 0.0 && warm_fraction <= 1.0) {
            return Err(CurriculumError::ShapeError(format!(
                "warm_fraction must lie in (0,1], got {warm_fraction}"
            )));
        }
        Ok(Self { o_min, o_max, warm_fraction })
    }

    /// Geometric-overlap default: 1.0 annealed to 0.5.
    pub fn geometric() -> Self {
        Self::new(0.5, 1.0, 0.5).expect("valid defaults")
    }

    /// Semantic-overlap default: 1.0 annealed to 0.75.
    pub fn semantic() -> Self {
        Self::new(0.75, 1.0, 0.5).expect("valid defaults")
    }

    /// Training progress s ∈ [0,1]: linear over the warm phase, then 1.
    pub fn progress(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return 1.0;
        }
        let warm = self.warm_fraction * total_steps as f64;
        (step as f64 / warm).min(1.0)
    }

    /// o(s) = s·o_min + (1−s)·o_max.
    pub fn target_overlap(&self, s: f64) -> f64 {
        let s = if (0.0..=1.0).contains(&s) {
            s
        } else {
            log::warn!("curriculum progress {s} outside [0,1], clamping");
            s.clamp(0.0, 1.0)
        };
        s * self.o_min + (1.0 - s) * self.o_max
    }
}

/// Pluggable pairwise overlap scorer in [0,1].
pub trait OverlapProvider: Sync {
    fn name(&self) -> &str;

    fn overlap(&self, seq: &SceneSequence, i: usize, j: usize)
        -> Result<f64, CurriculumError>;
}

/// Cosine similarity clamped to [0,1]; two zero vectors count as identical,
/// one zero vector as fully dissimilar.
fn cosine_clamped(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na > 0.0, nb > 0.0) {
        (false, false) => 1.0,
        (true, true) => (dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 1.0),
        _ => 0.0,
    }
}

/// Built-in semantic scorer: cosine similarity of a hand-rolled frame
/// descriptor (16×16 average-pooled luminance concatenated with an 8-bin
/// gradient-orientation histogram, each half L2-normalized).
#[derive(Debug, Default)]
pub struct SemanticOverlap;

impl SemanticOverlap {
    fn descriptor(frame: &[f32], width: usize, height: usize) -> Vec<f64> {
        let lum: Vec<f64> = frame
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();

        let mut pooled = vec![0.0; SEM_POOL * SEM_POOL];
        for by in 0..SEM_POOL {
            let (r0, r1) = ((by * height) / SEM_POOL, ((by + 1) * height) / SEM_POOL);
            for bx in 0..SEM_POOL {
                let (c0, c1) = ((bx * width) / SEM_POOL, ((bx + 1) * width) / SEM_POOL);
                let mut sum = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        sum += lum[r * width + c];
                    }
                }
                let n = (r1 - r0) * (c1 - c0);
                pooled[by * SEM_POOL + bx] = sum / n.max(1) as f64;
            }
        }

        let mut hist = vec![0.0; SEM_BINS];
        for r in 1..height.saturating_sub(1) {
            for c in 1..width.saturating_sub(1) {
                let gx = 0.5 * (lum[r * width + c + 1] - lum[r * width + c - 1]);
                let gy = 0.5 * (lum[(r + 1) * width + c] - lum[(r - 1) * width + c]);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 0.0 {
                    let theta = gy.atan2(gx) + std::f64::consts::PI;
                    let bin = ((theta / (2.0 * std::f64::consts::PI)) * SEM_BINS as f64) as usize;
                    hist[bin.min(SEM_BINS - 1)] += mag;
                }
            }
        }

        let normalize = |v: &mut [f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                for x in v.iter_mut() {
                    *x /= n;
                }
            }
        };
        normalize(&mut pooled);
        normalize(&mut hist);
        pooled.extend_from_slice(&hist);
        pooled
    }
}

impl OverlapProvider for SemanticOverlap {
    fn name(&self) -> &str {
        "semantic"
    }

    fn overlap(&self, seq: &SceneSequence, i: usize, j: usize) -> Result<f64, CurriculumError> {
        if i >= seq.len() || j >= seq.len() {
            return Err(CurriculumError::ShapeError(format!(
                "frame pair ({i},{j}) out of range for {} frames",
                seq.len()
            )));
        }
        if i == j {
            return Ok(1.0);
        }
        let (w, h) = (seq.width as usize, seq.height as usize);
        let a = Self::descriptor(seq.frame(i), w, h);
        let b = Self::descriptor(seq.frame(j), w, h);
        Ok(cosine_clamped(&a, &b))
    }
}

/// Ground-truth covisibility: the fraction of valid pixels of frame i whose
/// 3D point reprojects into frame j at a consistent depth.
#[derive(Debug, Default)]
pub struct GeometricOverlap;

impl OverlapProvider for GeometricOverlap {
    fn name(&self) -> &str {
        "geometric"
    }

    fn overlap(&self, seq: &SceneSequence, i: usize, j: usize) -> Result<f64, CurriculumError> {
        let gt = seq.gt.as_ref().ok_or(CurriculumError::MissingGroundTruth)?;
        if gt.depths.len() != seq.len() || gt.poses.len() != seq.len() {
            return Err(CurriculumError::MissingGroundTruth);
        }
        if i >= seq.len() || j >= seq.len() {
            return Err(CurriculumError::ShapeError(format!(
                "frame pair ({i},{j}) out of range for {} frames",
                seq.len()
            )));
        }
        let k = &gt.intrinsics;
        let (w, h) = (seq.width as usize, seq.height as usize);
        let inv_i = gt.poses[i].inverse();
        let pose_j = &gt.poses[j];
        let (depth_i, depth_j) = (&gt.depths[i], &gt.depths[j]);

        let mut valid = 0usize;
        let mut covisible = 0usize;
        for v in 0..h {
            for u in 0..w {
                let z = depth_i[v * w + u] as f64;
                if z <= 0.0 {
                    continue;
                }
                valid += 1;
                let cam = Vector3::new(
                    (u as f64 + 0.5 - k.cx) / k.fx * z,
                    (v as f64 + 0.5 - k.cy) / k.fy * z,
                    z,
                );
                let c = pose_j.transform_point(&inv_i.transform_point(&cam));
                if c.z <= 0.0 {
                    continue;
                }
                let (uj, vj) = (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
                if uj < 0.0 || vj < 0.0 || uj >= w as f64 || vj >= h as f64 {
                    continue;
                }
                let zj = depth_j[vj as usize * w + uj as usize] as f64;
                if zj > 0.0 && ((c.z - zj) / zj).abs() < DEPTH_CONSISTENCY {
                    covisible += 1;
                }
            }
        }
        if valid == 0 {
            return Ok(0.0);
        }
        Ok((covisible as f64 / valid as f64).clamp(0.0, 1.0))
    }
}

/// Precomputed per-frame embeddings, e.g. from an external vision model.
#[derive(Debug)]
pub struct ExternalOverlap {
    name: String,
    embeddings: Vec<Vec<f32>>,
}

impl ExternalOverlap {
    pub fn new(name: impl Into<String>, embeddings: Vec<Vec<f32>>) -> Self {
        Self { name: name.into(), embeddings }
    }

    pub fn from_sidecar(name: impl Into<String>, path: &Path) -> Result<Self, CurriculumError> {
        Ok(Self::new(name, read_embeddings(path)?))
    }
}

impl OverlapProvider for ExternalOverlap {
    fn name(&self) -> &str {
        &self.name
    }

    fn overlap(&self, seq: &SceneSequence, i: usize, j: usize) -> Result<f64, CurriculumError> {
        if self.embeddings.len() != seq.len() {
            return Err(CurriculumError::ShapeError(format!(
                "{} embeddings for {} frames",
                self.embeddings.len(),
                seq.len()
            )));
        }
        if i >= seq.len() || j >= seq.len() {
            return Err(CurriculumError::ShapeError(format!(
                "frame pair ({i},{j}) out of range for {} frames",
                seq.len()
            )));
        }
        let to64 = |e: &[f32]| e.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Ok(cosine_clamped(
            &to64(&self.embeddings[i]),
            &to64(&self.embeddings[j]),
        ))
    }
}

/// Write an embedding sidecar: u32 count, u32 dim, then count·dim f32, all
/// little-endian.
pub fn write_embeddings(path: &Path, embeddings: &[Vec<f32>]) -> Result<(), CurriculumError> {
    let dim = embeddings.first().map_or(0, |e| e.len());
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(CurriculumError::ShapeError(
            "embeddings must share one dimension".into(),
        ));
    }
    let mut bytes = Vec::with_capacity(8 + embeddings.len() * dim * 4);
    bytes.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    for e in embeddings {
        for v in e {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|source| CurriculumError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read an embedding sidecar written by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f32>>, CurriculumError> {
    let bytes = fs::read(path).map_err(|source| CurriculumError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 8 {
        return Err(CurriculumError::Parse(format!(
            "{}: truncated sidecar header",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + count * dim * 4 {
        return Err(CurriculumError::Parse(format!(
            "{}: sidecar payload does not match header",
            path.display()
        )));
    }
    let mut floats = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    Ok((0..count)
        .map(|_| (0..dim).map(|_| floats.next().unwrap()).collect())
        .collect())
}

/// splitmix64-style finalizer mixing a base seed with two task coordinates,
/// so labeling tasks own independent generators regardless of worker count.
fn task_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Running minimum over increasing Δt, so overlap never grows with spacing.
pub fn isotonize(values: &mut [f64]) {
    for k in 1..values.len() {
        values[k] = values[k].min(values[k - 1]);
    }
}

/// Default spacing grid: powers of two while a triplet still fits.
pub fn default_grid(len: usize) -> Vec<u32> {
    let mut grid = Vec::new();
    let mut dt = 1u32;
    while len >= 2 * dt as usize + 1 {
        grid.push(dt);
        dt = dt.saturating_mul(2);
    }
    grid
}

/// Estimate a sequence's overlap profile from sampled frame triplets.
///
/// For each feasible spacing Δt, `n_triplets` start frames are drawn
/// uniformly and each triplet scores ½(o(i, i+Δt) + o(i+Δt, i+2Δt)); the
/// per-spacing means are isotonized. Spacings the sequence cannot fit are
/// skipped; if none fit the sequence is too short.
pub fn label_profile(
    seq: &SceneSequence,
    provider: &dyn OverlapProvider,
    spacings: &[u32],
    n_triplets: u32,
    seed: u64,
) -> Result<OverlapProfile, CurriculumError> {
    if n_triplets == 0 {
        return Err(CurriculumError::ShapeError("n_triplets must be positive".into()));
    }
    let len = seq.len();
    let mut grid: Vec<u32> = spacings
        .iter()
        .copied()
        .filter(|&dt| dt >= 1 && len >= 2 * dt as usize + 1)
        .collect();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() {
        return Err(CurriculumError::SequenceTooShort);
    }

    let tasks: Vec<(u32, u32)> = grid
        .iter()
        .flat_map(|&dt| (0..n_triplets).map(move |idx| (dt, idx)))
        .collect();
    let scores: Vec<f64> = tasks
        .par_iter()
        .map(|&(dt, idx)| {
            let mut rng = StdRng::seed_from_u64(task_seed(seed, dt as u64, idx as u64));
            let i = rng.random_range(0..=len - 1 - 2 * dt as usize);
            let a = provider.overlap(seq, i, i + dt as usize)?;
            let b = provider.overlap(seq, i + dt as usize, i + 2 * dt as usize)?;
            Ok(0.5 * (a + b))
        })
        .collect::<Result<_, CurriculumError>>()?;

    let mut values: Vec<f64> = grid
        .iter()
        .enumerate()
        .map(|(gi, _)| {
            let chunk = &scores[gi * n_triplets as usize..(gi + 1) * n_triplets as usize];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    isotonize(&mut values);

    Ok(OverlapProfile {
        sequence: seq.dir.display().to_string(),
        provider: provider.name().to_string(),
        grid,
        values,
        n_triplets,
        seed,
    })
}

/// Invert an isotonized profile: the real-valued spacing whose overlap is
/// `o_target`, linearly interpolated and clamped to the grid's range. Flat
/// segments resolve to their smaller spacing.
pub fn lookup_spacing(profile: &OverlapProfile, o_target: f64) -> Result<f64, CurriculumError> {
    let (grid, values) = (&profile.grid, &profile.values);
    if grid.is_empty() || grid.len() != values.len() {
        return Err(CurriculumError::EmptyProfile);
    }
    if o_target >= values[0] {
        return Ok(grid[0] as f64);
    }
    if o_target <= values[values.len() - 1] {
        return Ok(grid[grid.len() - 1] as f64);
    }
    for k in 0..values.len() - 1 {
        if values[k] >= o_target && o_target >= values[k + 1] {
            let drop = values[k] - values[k + 1];
            if drop < 1e-15 {
                return Ok(grid[k] as f64);
            }
            let lam = (values[k] - o_target) / drop;
            return Ok(grid[k] as f64 + lam * (grid[k + 1] - grid[k]) as f64);
        }
    }
    // Unreachable on an isotonized profile; be safe on unsorted input.
    Ok(grid[grid.len() - 1] as f64)
}

/// Draw a window of `v` frame indices at the curriculum's current spacing.
///
/// The spacing comes from inverting the profile at the scheduled target
/// overlap; the window spans (v−1)·Δt frames, truncated to what the sequence
/// can hold, with a uniform start.
pub fn sample_window(
    len: usize,
    profile: &OverlapProfile,
    schedule: &CurriculumSchedule,
    s: f64,
    v: usize,
    rng: &mut StdRng,
) -> Result<Vec<usize>, CurriculumError> {
    if v < 2 {
        return Err(CurriculumError::ShapeError(format!(
            "window needs at least 2 views, got {v}"
        )));
    }
    if profile.grid.is_empty() {
        return Err(CurriculumError::EmptyProfile);
    }
    if len == 0 || (v - 1) * profile.grid[0] as usize > len - 1 {
        return Err(CurriculumError::SequenceTooShort);
    }
    let mut dt = lookup_spacing(profile, schedule.target_overlap(s))?;
    let mut span = ((v - 1) as f64 * dt).round() as usize;
    if span > len - 1 {
        dt = (len - 1) as f64 / (v - 1) as f64;
        span = len - 1;
    }
    let start = rng.random_range(0..=len - 1 - span);
    let mut indices = Vec::with_capacity(v);
    for k in 0..v {
        let mut idx = start + (k as f64 * dt).round() as usize;
        // Defensive: spacings >= 1 cannot collide after rounding, but a
        // duplicate would silently drop a view from the window.
        if let Some(&prev) = indices.last() {
            if idx <= prev {
                idx = prev + 1;
            }
        }
        indices.push(idx.min(len - 1));
    }
    Ok(indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use crate::synthscene::{gen_scene, render_dataset, GroundTruth, SceneConfig};
    use nalgebra::Vector4;
    use proptest::prelude::*;

    fn seq_from_frames(width: u32, height: u32, frames: Vec<Vec<f32>>) -> SceneSequence {
        SceneSequence {
            dir: PathBuf::from("test-seq"),
            width,
            height,
            frame_files: (0..frames.len()).map(|i| format!("{i}.png")).collect(),
            frames,
            gt: None,
            preset: None,
            seed: None,
        }
    }

    fn box_sequence(n_views: usize, wh: u32, orbit: f64) -> SceneSequence {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            preset: "box".into(),
            n_views,
            width: wh,
            height: wh,
            orbit_deg: orbit,
            seed: 3,
        };
        render_dataset(&gen_scene(&cfg).unwrap(), dir.path()).unwrap()
    }

    /// Scores only adjacent-in-time lookups from a fixed table.
    struct StubOverlap(Vec<f64>);

    impl OverlapProvider for StubOverlap {
        fn name(&self) -> &str {
            "stub"
        }
        fn overlap(&self, _: &SceneSequence, i: usize, j: usize) -> Result<f64, CurriculumError> {
            assert_eq!(j, i + 1);
            Ok(self.0[i])
        }
    }

    #[test]
    fn triplet_score_averages_the_two_pairs() {
        let seq = seq_from_frames(4, 4, vec![vec![0.0; 48]; 3]);
        let provider = StubOverlap(vec![0.8, 0.6]);
        let profile = label_profile(&seq, &provider, &[1], 4, 0).unwrap();
        assert_eq!(profile.grid, vec![1]);
        assert!((profile.values[0] - 0.7).abs() < 1e-15);
        assert_eq!(profile.provider, "stub");
    }

    #[test]
    fn constant_sequence_has_unit_semantic_overlap() {
        let frame = vec![0.4f32; 16 * 16 * 3];
        let seq = seq_from_frames(16, 16, vec![frame; 5]);
        let profile = label_profile(&seq, &SemanticOverlap, &[1, 2], 4, 0).unwrap();
        for v in &profile.values {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn isotonize_is_a_running_minimum() {
        let mut v = vec![0.9, 0.7, 0.75];
        isotonize(&mut v);
        assert_eq!(v, vec![0.9, 0.7, 0.7]);
    }

    #[test]
    fn schedule_hits_its_endpoints() {
        let sched = CurriculumSchedule::geometric();
        assert_eq!(sched.target_overlap(0.0), 1.0);
        assert_eq!(sched.target_overlap(1.0), 0.5);
        assert_eq!(sched.target_overlap(0.5), 0.75);
        // Outside [0,1] clamps.
        assert_eq!(sched.target_overlap(1.7), 0.5);
        assert_eq!(CurriculumSchedule::semantic().target_overlap(1.0), 0.75);

        assert_eq!(sched.progress(0, 100), 0.0);
        assert_eq!(sched.progress(50, 100), 1.0);
        assert_eq!(sched.progress(25, 100), 0.5);
        assert_eq!(sched.progress(90, 100), 1.0);
        assert!(CurriculumSchedule::new(0.8, 0.5, 0.5).is_err());
    }

    fn profile_of(grid: Vec<u32>, values: Vec<f64>) -> OverlapProfile {
        OverlapProfile {
            sequence: "p".into(),
            provider: "stub".into(),
            grid,
            values,
            n_triplets: 1,
            seed: 0,
        }
    }

    #[test]
    fn lookup_interpolates_and_clamps() {
        let p = profile_of(vec![1, 2], vec![0.9, 0.7]);
        assert!((lookup_spacing(&p, 0.8).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(lookup_spacing(&p, 0.95).unwrap(), 1.0);
        assert_eq!(lookup_spacing(&p, 0.6).unwrap(), 2.0);

        // Flat segments resolve to the smaller spacing.
        let flat = profile_of(vec![1, 2, 4], vec![0.9, 0.9, 0.2]);
        assert_eq!(lookup_spacing(&flat, 0.9).unwrap(), 1.0);

        let empty = profile_of(vec![], vec![]);
        assert!(matches!(
            lookup_spacing(&empty, 0.5),
            Err(CurriculumError::EmptyProfile)
        ));
    }

    #[test]
    fn windows_follow_the_resolved_spacing() {
        let sched = CurriculumSchedule::geometric();
        // Single-entry profile pins dt = 3; 10 views span 27 frames.
        let p = profile_of(vec![3], vec![0.8]);
        let mut rng = StdRng::seed_from_u64(1);
        let idx = sample_window(28, &p, &sched, 1.0, 10, &mut rng).unwrap();
        assert_eq!(idx, (0..10).map(|k| 3 * k).collect::<Vec<_>>());

        // Only one placement when the sequence exactly fits.
        let p1 = profile_of(vec![4], vec![0.8]);
        let mut rng = StdRng::seed_from_u64(2);
        assert_eq!(sample_window(5, &p1, &sched, 0.0, 2, &mut rng).unwrap(), vec![0, 4]);

        // Spans beyond the sequence truncate to the widest feasible window.
        let p2 = profile_of(vec![1, 4], vec![0.9, 0.2]);
        let mut rng = StdRng::seed_from_u64(3);
        let idx = sample_window(8, &p2, &sched, 1.0, 4, &mut rng).unwrap();
        assert_eq!(*idx.last().unwrap() - idx[0], 7);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));

        // Shorter than the minimum spacing allows.
        let mut rng = StdRng::seed_from_u64(4);
        assert!(matches!(
            sample_window(3, &p1, &sched, 0.0, 2, &mut rng),
            Err(CurriculumError::SequenceTooShort)
        ));

        // Fixed seed reproduces the draw.
        let many = profile_of(vec![2], vec![0.8]);
        let draw = |seed| {
            let mut rng = StdRng::seed_from_u64(seed);
            sample_window(40, &many, &sched, 0.7, 5, &mut rng).unwrap()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn default_grid_is_dyadic() {
        assert_eq!(default_grid(10), vec![1, 2, 4]);
        assert_eq!(default_grid(3), vec![1]);
        assert_eq!(default_grid(2), Vec::<u32>::new());
    }

    #[test]
    fn semantic_separates_distinct_frames() {
        let w = 32usize;
        let checker: Vec<f32> = (0..w * w)
            .flat_map(|i| {
                let v = if ((i / w) / 4 + (i % w) / 4) % 2 == 0 { 0.9f32 } else { 0.1 };
                [v, v, v]
            })
            .collect();
        let flat = vec![0.5f32; w * w * 3];
        let seq = seq_from_frames(w as u32, w as u32, vec![checker.clone(), flat, checker]);
        let same = SemanticOverlap.overlap(&seq, 0, 2).unwrap();
        let diff = SemanticOverlap.overlap(&seq, 0, 1).unwrap();
        assert!((same - 1.0).abs() < 1e-12);
        assert!(diff < same && diff >= 0.0, "diff={diff}");
        assert_eq!(SemanticOverlap.overlap(&seq, 1, 1).unwrap(), 1.0);
    }

    #[test]
    fn geometric_conventions() {
        let seq = box_sequence(4, 32, 25.0);
        let geo = GeometricOverlap;
        assert_eq!(geo.overlap(&seq, 2, 2).unwrap(), 1.0);
        let near = geo.overlap(&seq, 0, 1).unwrap();
        let far = geo.overlap(&seq, 0, 3).unwrap();
        assert!(near > far, "near={near} far={far}");

        // No ground truth at all.
        let bare = seq_from_frames(8, 8, vec![vec![0.0; 192]; 2]);
        assert!(matches!(
            GeometricOverlap.overlap(&bare, 0, 1),
            Err(CurriculumError::MissingGroundTruth)
        ));

        // Disjoint frusta: the second camera faces the opposite way.
        let k = CameraIntrinsics::<f64>::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let turned = CameraPose::new(Vector4::new(0.0, 0.0, 1.0, 0.0), Vector3::zeros()).unwrap();
        let mut seq2 = seq_from_frames(16, 16, vec![vec![0.0; 768]; 2]);
        seq2.gt = Some(GroundTruth {
            intrinsics: k,
            poses: vec![CameraPose::identity(), turned],
            depths: vec![vec![1.0; 256]; 2],
        });
        assert_eq!(GeometricOverlap.overlap(&seq2, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn geometric_matches_a_bruteforce_count() {
        // Independent oracle: raw per-pixel loop over explicit matrices.
        let seq = box_sequence(4, 32, 30.0);
        let gt = seq.gt.as_ref().unwrap();
        let k = &gt.intrinsics;
        let (w, h) = (32usize, 32usize);
        let (i, j) = (0usize, 2usize);

        let ri = gt.poses[i].rotation();
        let rj = gt.poses[j].rotation();
        let (ti, tj) = (gt.poses[i].trans, gt.poses[j].trans);
        let mut valid = 0.0;
        let mut hits = 0.0;
        for v in 0..h {
            for u in 0..w {
                let z = gt.depths[i][v * w + u] as f64;
                if z <= 0.0 {
                    continue;
                }
                valid += 1.0;
                let cam = Vector3::new(
                    (u as f64 + 0.5 - k.cx) / k.fx * z,
                    (v as f64 + 0.5 - k.cy) / k.fy * z,
                    z,
                );
                let world = ri.transpose() * (cam - ti);
                let cj = rj * world + tj;
                if cj.z <= 0.0 {
                    continue;
                }
                let uj = k.fx * cj.x / cj.z + k.cx;
                let vj = k.fy * cj.y / cj.z + k.cy;
                if uj < 0.0 || vj < 0.0 || uj >= w as f64 || vj >= h as f64 {
                    continue;
                }
                let zj = gt.depths[j][vj as usize * w + uj as usize] as f64;
                if zj > 0.0 && ((cj.z - zj) / zj).abs() < 0.05 {
                    hits += 1.0;
                }
            }
        }
        let oracle = hits / valid;
        let got = GeometricOverlap.overlap(&seq, i, j).unwrap();
        assert!((got - oracle).abs() < 0.02, "got={got} oracle={oracle}");
    }

    #[test]
    fn labeling_is_deterministic() {
        let seq = box_sequence(6, 16, 40.0);
        let a = label_profile(&seq, &SemanticOverlap, &default_grid(6), 4, 11).unwrap();
        let b = label_profile(&seq, &SemanticOverlap, &default_grid(6), 4, 11).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.windows(2).all(|w| w[1] <= w[0]), "isotonized");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.json");
        a.save(&path).unwrap();
        let back = OverlapProfile::load(&path).unwrap();
        assert_eq!(back.values, a.values);
        assert_eq!(back.grid, a.grid);
        assert_eq!(back.seed, 11);
    }

    #[test]
    fn embedding_sidecar_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let embs = vec![vec![1.0f32, 0.0, 0.25], vec![0.5, -0.5, 0.125]];
        write_embeddings(&path, &embs).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), embs);

        let seq = seq_from_frames(4, 4, vec![vec![0.1; 48]; 2]);
        let ext = ExternalOverlap::from_sidecar("dino", &path).unwrap();
        assert_eq!(ext.name(), "dino");
        let manual = {
            let dot: f64 = 1.0 * 0.5 + 0.25 * 0.125;
            let na = (1.0f64 + 0.0625).sqrt();
            let nb = (0.25f64 + 0.25 + 0.015625).sqrt();
            (dot / (na * nb)).clamp(0.0, 1.0)
        };
        assert!((ext.overlap(&seq, 0, 1).unwrap() - manual).abs() < 1e-9);

        let ragged = vec![vec![1.0f32], vec![1.0, 2.0]];
        assert!(write_embeddings(&path, &ragged).is_err());
    }

    proptest! {
        /// Harder curricula never shrink the resolved spacing.
        #[test]
        fn resolved_spacing_is_monotone_in_progress(
            raw in proptest::collection::vec(0.0f64..=1.0, 2..6),
            o_min in 0.0f64..0.6,
            gap in 0.0f64..0.4,
            s1 in 0.0f64..=1.0,
            s2 in 0.0f64..=1.0,
        ) {
            let mut values = raw.clone();
            isotonize(&mut values);
            let grid: Vec<u32> = (0..values.len() as u32).map(|k| 1 << k).collect();
            let p = profile_of(grid, values);
            let sched = CurriculumSchedule::new(o_min, o_min + gap, 0.5).unwrap();
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = lookup_spacing(&p, sched.target_overlap(lo)).unwrap();
            let b = lookup_spacing(&p, sched.target_overlap(hi)).unwrap();
            prop_assert!(b >= a - 1e-12, "s={lo}->{a}, s={hi}->{b}");
        }
    }
}
