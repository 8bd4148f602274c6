//! Differentiable 3D Gaussian rasterizer.
//!
//! Forward: Gaussians are anchored to source-view pixels as a distance along
//! the pixel ray, projected into the target view by the EWA approximation,
//! and composited front to back over a black background. Backward: exact
//! reverse-mode adjoints to every raw Gaussian parameter, the source and
//! target camera poses (SE(3) tangent, left perturbation), and the shared
//! intrinsics.
//!
//! Parameters are held at the working precision `S`; compositing and all
//! gradient reductions accumulate in f64 regardless of `S`.

mod backward;
mod bruteforce;
mod checkpoint;
mod gradcheck;
mod project;
mod render;
mod sh;

pub use backward::render_backward;
pub use bruteforce::render_bruteforce;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport, SceneReport};
pub use project::{build_covariance, project_gaussian, Projection};
pub use render::{render, render_world, ForwardContext};
pub use sh::{basis_len, eval_sh, sh_basis, sh_basis_grad, SH_C0};

use nalgebra::{Vector3, Vector4};

use crate::scalar::{sf, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum SplatError {
    #[error("non-finite parameter on Gaussian {index}")]
    NonFiniteInput { index: usize },
    #[error("near-zero orientation quaternion on Gaussian {index}")]
    DegenerateRotation { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One Gaussian anchored to a source-view pixel. All fields are raw,
/// unconstrained optimization parameters; activations (softplus on `d`, exp
/// on `scale`, sigmoid on `opacity`, normalization on `q`) are applied at
/// render time.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGaussian<S: Scalar> {
    /// Distance along the source pixel ray, through softplus.
    pub d: S,
    /// Orientation quaternion (w, x, y, z), stored unnormalized.
    pub q: Vector4<S>,
    /// SH color coefficients, coefficient-major: [c0.r, c0.g, c0.b, c1.r, ..].
    pub sh: Vec<S>,
    /// Per-axis log standard deviations, through exp.
    pub scale: Vector3<S>,
    /// Opacity logit, through sigmoid.
    pub opacity: S,
    /// Index into the source-pose slice handed to `render`.
    pub source_view: u32,
    /// Row-major pixel index (v·width + u) in the source view.
    pub source_pixel: u32,
}

/// Flat collection of pixel-anchored Gaussians. Sets built by the fitting
/// pipeline hold exactly one Gaussian per reference pixel (count =
/// k_ref·height·width); test scenes may be sparse.
#[derive(Debug, Clone)]
pub struct GaussianSet<S: Scalar> {
    pub gaussians: Vec<PixelGaussian<S>>,
    pub sh_degree: u32,
    pub k_ref: u32,
    /// Source image dimensions; `source_pixel` indexes row-major into these.
    pub width: u32,
    pub height: u32,
}

impl<S: Scalar> GaussianSet<S> {
    pub fn new(
        gaussians: Vec<PixelGaussian<S>>,
        sh_degree: u32,
        k_ref: u32,
        width: u32,
        height: u32,
    ) -> Result<Self, SplatError> {
        if sh_degree > 3 {
            return Err(SplatError::ShapeError(format!("sh_degree {sh_degree} > 3")));
        }
        let coeffs = sh::basis_len(sh_degree) * 3;
        for (i, g) in gaussians.iter().enumerate() {
            if g.sh.len() != coeffs {
                return Err(SplatError::ShapeError(format!(
                    "Gaussian {i} has {} SH values, degree {sh_degree} needs {coeffs}",
                    g.sh.len()
                )));
            }
            if g.source_view >= k_ref {
                return Err(SplatError::ShapeError(format!(
                    "Gaussian {i} source_view {} out of range (k_ref {k_ref})",
                    g.source_view
                )));
            }
            if g.source_pixel >= width * height {
                return Err(SplatError::ShapeError(format!(
                    "Gaussian {i} source_pixel {} out of range ({width}x{height})",
                    g.source_pixel
                )));
            }
        }
        Ok(Self { gaussians, sh_degree, k_ref, width, height })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Number of SH coefficients per channel.
    pub fn sh_coeffs(&self) -> usize {
        sh::basis_len(self.sh_degree)
    }

    /// Whether the set covers every reference pixel exactly once.
    pub fn is_pixel_aligned(&self) -> bool {
        self.gaussians.len() == (self.k_ref * self.width * self.height) as usize
    }

    pub fn cast<T: Scalar>(&self) -> GaussianSet<T> {
        GaussianSet {
            gaussians: self
                .gaussians
                .iter()
                .map(|g| PixelGaussian {
                    d: sf(g.d.to_f64()),
                    q: g.q.map(|v| sf(v.to_f64())),
                    sh: g.sh.iter().map(|v| sf(v.to_f64())).collect(),
                    scale: g.scale.map(|v| sf(v.to_f64())),
                    opacity: sf(g.opacity.to_f64()),
                    source_view: g.source_view,
                    source_pixel: g.source_pixel,
                })
                .collect(),
            sh_degree: self.sh_degree,
            k_ref: self.k_ref,
            width: self.width,
            height: self.height,
        }
    }
}

/// Free-floating Gaussian with already-activated parameters. Used for
/// authored ground-truth scenes and compositing tests; not differentiable.
#[derive(Debug, Clone)]
pub struct WorldGaussian<S: Scalar> {
    pub mean: Vector3<S>,
    /// (w, x, y, z), normalized on read.
    pub quat: Vector4<S>,
    /// Per-axis standard deviations, > 0.
    pub scale: Vector3<S>,
    /// Coefficient-major SH values.
    pub sh: Vec<S>,
    /// In (0, 1].
    pub opacity: S,
}

/// Composited image over a black background plus per-pixel alpha and
/// alpha-weighted expected depth (0 where alpha = 0). Row-major.
#[derive(Debug, Clone)]
pub struct RenderOutput<S: Scalar> {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<S>,
    pub alpha: Vec<S>,
    pub depth: Vec<S>,
}

impl<S: Scalar> RenderOutput<S> {
    pub fn zeros(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Self {
            width,
            height,
            rgb: vec![S::zero(); n * 3],
            alpha: vec![S::zero(); n],
            depth: vec![S::zero(); n],
        }
    }

    pub fn pixel_rgb(&self, u: u32, v: u32) -> Vector3<S> {
        let i = ((v * self.width + u) * 3) as usize;
        Vector3::new(self.rgb[i], self.rgb[i + 1], self.rgb[i + 2])
    }
}

/// Rendering constants. Defaults are the fixed conventions shared bit-for-bit
/// by the tiled path and the brute-force oracle.
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions<S: Scalar> {
    /// Low-pass dilation added to cov2d, in px².
    pub kappa: S,
    /// Per-contribution alpha clamp.
    pub alpha_max: S,
    /// Contributions below this are skipped.
    pub alpha_min: S,
    /// Near-plane depth; Gaussians at or behind it are culled.
    pub near: S,
    pub tile_size: u32,
}

impl<S: Scalar> Default for RenderOptions<S> {
    fn default() -> Self {
        Self {
            kappa: sf(0.3),
            alpha_max: sf(0.99),
            alpha_min: sf(1.0 / 255.0),
            near: sf(0.01),
            tile_size: 16,
        }
    }
}

impl<S: Scalar> RenderOptions<S> {
    pub fn cast<T: Scalar>(&self) -> RenderOptions<T> {
        RenderOptions {
            kappa: sf(self.kappa.to_f64()),
            alpha_max: sf(self.alpha_max.to_f64()),
            alpha_min: sf(self.alpha_min.to_f64()),
            near: sf(self.near.to_f64()),
            tile_size: self.tile_size,
        }
    }
}

/// Adjoints of a scalar loss with respect to every input of `render`.
/// Gaussian entries are laid out flat, aligned with the rendered set; pose
/// adjoints are 6-vectors [ρ; φ] in the SE(3) tangent at the current pose
/// (left perturbation T ← exp(ξ)·T). Always f64: gradients are reductions.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub n: usize,
    /// SH coefficients per channel.
    pub sh_coeffs: usize,
    pub d: Vec<f64>,
    pub q: Vec<f64>,
    pub sh: Vec<f64>,
    pub scale: Vec<f64>,
    pub opacity: Vec<f64>,
    pub source_poses: Vec<[f64; 6]>,
    pub target_pose: [f64; 6],
    pub intrinsics: [f64; 4],
}

impl GradientBundle {
    pub fn zeros(n: usize, sh_coeffs: usize, n_views: usize) -> Self {
        Self {
            n,
            sh_coeffs,
            d: vec![0.0; n],
            q: vec![0.0; 4 * n],
            sh: vec![0.0; n * sh_coeffs * 3],
            scale: vec![0.0; 3 * n],
            opacity: vec![0.0; n],
            source_poses: vec![[0.0; 6]; n_views],
            target_pose: [0.0; 6],
            intrinsics: [0.0; 4],
        }
    }

    /// Accumulate `other`, which must have identical shape.
    pub fn add_assign(&mut self, other: &GradientBundle) {
        assert_eq!(self.n, other.n);
        assert_eq!(self.sh_coeffs, other.sh_coeffs);
        assert_eq!(self.source_poses.len(), other.source_poses.len());
        let add = |a: &mut Vec<f64>, b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.d, &other.d);
        add(&mut self.q, &other.q);
        add(&mut self.sh, &other.sh);
        add(&mut self.scale, &other.scale);
        add(&mut self.opacity, &other.opacity);
        for (a, b) in self.source_poses.iter_mut().zip(&other.source_poses) {
            for k in 0..6 {
                a[k] += b[k];
            }
        }
        for k in 0..6 {
            self.target_pose[k] += other.target_pose[k];
        }
        for k in 0..4 {
            self.intrinsics[k] += other.intrinsics[k];
        }
    }

    pub fn scale_by(&mut self, s: f64) {
        for v in self
            .d
            .iter_mut()
            .chain(self.q.iter_mut())
            .chain(self.sh.iter_mut())
            .chain(self.scale.iter_mut())
            .chain(self.opacity.iter_mut())
        {
            *v *= s;
        }
        for p in &mut self.source_poses {
            p.iter_mut().for_each(|v| *v *= s);
        }
        self.target_pose.iter_mut().for_each(|v| *v *= s);
        self.intrinsics.iter_mut().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.d
            .iter()
            .chain(self.q.iter())
            .chain(self.sh.iter())
            .chain(self.scale.iter())
            .chain(self.opacity.iter())
            .chain(self.source_poses.iter().flatten())
            .chain(self.target_pose.iter())
            .chain(self.intrinsics.iter())
            .all(|v| v.is_finite())
    }
}

/// Numerically stable softplus, max(x,0) + ln(1 + e^{−|x|}).
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for y > 0: y + ln(1 − e^{−y}). The difference goes
/// through exp_m1 so tiny y (deeply negative raw values) round-trips.
pub fn softplus_inv<S: Scalar>(y: S) -> S {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Inverse of sigmoid for p ∈ (0, 1).
pub fn logit<S: Scalar>(p: S) -> S {
    (p / (S::one() - p)).ln()
}
