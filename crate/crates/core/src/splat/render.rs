//! Tiled forward rasterization.
//!
//! Per-Gaussian geometry (activations, ray anchoring, EWA projection, SH)
//! runs at the working precision `S`, then every screen-space quantity is
//! widened to f64. Compositing and the saved forward context are entirely
//! f64, so the backward pass replays the exact forward arithmetic.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::project::{covariance_from_rot, project_gaussian};
use super::sh::{basis_len, eval_sh_raw};
use super::{
    sigmoid, softplus, GaussianSet, RenderOptions, RenderOutput, SplatError, WorldGaussian,
};
use crate::geometry::{quat_to_rot, CameraIntrinsics, CameraPose};
use crate::scalar::{sf, Scalar};

/// Screen-space footprint of one Gaussian, ready for per-pixel evaluation.
#[derive(Debug, Clone, Copy)]
pub(super) struct Splat2D {
    pub z: f64,
    pub mean2d: Vector2<f64>,
    /// Inverse of cov2d.
    pub p: Matrix2<f64>,
    pub alpha: f64,
    pub color: Vector3<f64>,
}

impl Splat2D {
    fn zeroed() -> Self {
        Self {
            z: 0.0,
            mean2d: Vector2::zeros(),
            p: Matrix2::zeros(),
            alpha: 0.0,
            color: Vector3::zeros(),
        }
    }
}

/// Everything the backward pass needs to replay one Gaussian, widened to f64.
/// Fields of excluded entries (culled, sub-threshold, or off-image) are
/// zeroed and must not be read.
#[derive(Debug, Clone)]
pub(super) struct Entry {
    pub included: bool,
    pub d_raw: f64,
    pub d_act: f64,
    pub q: Vector4<f64>,
    /// Activated per-axis standard deviations.
    pub sc: Vector3<f64>,
    pub alpha: f64,
    pub sh: Vec<f64>,
    pub view: usize,
    /// Camera-frame ray direction before normalization, ((u+½−cx)/fx, (v+½−cy)/fy, 1).
    pub vcam: Vector3<f64>,
    pub vnorm: f64,
    /// vcam / vnorm.
    pub ucam: Vector3<f64>,
    /// World-frame unit ray direction R_sᵀ·ucam.
    pub wdir: Vector3<f64>,
    /// R(q̄).
    pub rot: Matrix3<f64>,
    /// W·Σ·Wᵀ in the target camera frame.
    pub sigma_cam: Matrix3<f64>,
    pub mean_cam: Vector3<f64>,
    pub mean2d: Vector2<f64>,
    pub jac: Matrix2x3<f64>,
    pub viewdir: Vector3<f64>,
    /// |mean − target center|.
    pub nv: f64,
    /// Pre-clamp SH color.
    pub rgb_raw: Vector3<f64>,
}

impl Entry {
    fn excluded() -> Self {
        Self {
            included: false,
            d_raw: 0.0,
            d_act: 0.0,
            q: Vector4::zeros(),
            sc: Vector3::zeros(),
            alpha: 0.0,
            sh: Vec::new(),
            view: 0,
            vcam: Vector3::zeros(),
            vnorm: 0.0,
            ucam: Vector3::zeros(),
            wdir: Vector3::zeros(),
            rot: Matrix3::zeros(),
            sigma_cam: Matrix3::zeros(),
            mean_cam: Vector3::zeros(),
            mean2d: Vector2::zeros(),
            jac: Matrix2x3::zeros(),
            viewdir: Vector3::zeros(),
            nv: 0.0,
            rgb_raw: Vector3::zeros(),
        }
    }
}

/// Per-tile lists of splat indices, each in ascending (depth, index) order.
#[derive(Debug, Clone)]
pub(super) struct TileGrid {
    pub tile: u32,
    pub tiles_x: u32,
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn new(width: u32, height: u32, tile: u32) -> Self {
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        Self {
            tile,
            tiles_x,
            lists: vec![Vec::new(); (tiles_x * tiles_y) as usize],
        }
    }

    /// Pixel rectangle of tile t: (x0, y0, x1, y1), exclusive upper bounds.
    pub fn rect(&self, t: usize, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let tx = t as u32 % self.tiles_x;
        let ty = t as u32 / self.tiles_x;
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (x0, y0, (x0 + self.tile).min(width), (y0 + self.tile).min(height))
    }
}

/// Saved forward state for one `render` call.
#[derive(Debug)]
pub struct ForwardContext {
    pub(super) width: u32,
    pub(super) height: u32,
    pub(super) sh_degree: u32,
    pub(super) n_views: usize,
    /// (fx, fy, cx, cy).
    pub(super) intr: [f64; 4],
    pub(super) target_rot: Matrix3<f64>,
    pub(super) source_rots: Vec<Matrix3<f64>>,
    pub(super) entries: Vec<Entry>,
    pub(super) splats: Vec<Splat2D>,
    pub(super) tiles: TileGrid,
    pub(super) opts: RenderOptions<f64>,
}

/// Influence radius in units of the screen-space standard deviation. Beyond
/// it a contribution is provably below alpha_min, so tile assignment by this
/// radius cannot change the composited result.
fn influence_sigmas(alpha: f64, opts: &RenderOptions<f64>) -> f64 {
    let c = 2.0 * (alpha / opts.alpha_min).ln();
    c.max(0.0).sqrt().max(3.0) + 0.01
}

/// Pixel-index bounds touched by a splat, or None when off-image.
fn pixel_bounds(
    mean2d: &Vector2<f64>,
    cov2d: &Matrix2<f64>,
    alpha: f64,
    width: u32,
    height: u32,
    opts: &RenderOptions<f64>,
) -> Option<(u32, u32, u32, u32)> {
    let r = influence_sigmas(alpha, opts);
    let hx = r * cov2d[(0, 0)].sqrt();
    let hy = r * cov2d[(1, 1)].sqrt();
    // Pixel (ix, iy) has center (ix+0.5, iy+0.5).
    let ix0 = (mean2d[0] - hx - 0.5).ceil().max(0.0);
    let ix1 = (mean2d[0] + hx - 0.5).floor().min(width as f64 - 1.0);
    let iy0 = (mean2d[1] - hy - 0.5).ceil().max(0.0);
    let iy1 = (mean2d[1] + hy - 0.5).floor().min(height as f64 - 1.0);
    if ix0 > ix1 || iy0 > iy1 {
        return None;
    }
    Some((ix0 as u32, ix1 as u32, iy0 as u32, iy1 as u32))
}

fn invert_cov2d(c: &Matrix2<f64>) -> Matrix2<f64> {
    // det ≥ κ² > 0: the dilation makes cov2d strictly positive definite.
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]) / det
}

/// Bins splats into tiles in ascending (depth, index) order.
fn build_tiles(
    splats: &[Splat2D],
    bounds: &[Option<(u32, u32, u32, u32)>],
    width: u32,
    height: u32,
    tile: u32,
) -> TileGrid {
    let mut grid = TileGrid::new(width, height, tile);
    let mut order: Vec<u32> = (0..splats.len() as u32).filter(|&i| bounds[i as usize].is_some()).collect();
    order.sort_unstable_by(|&a, &b| {
        splats[a as usize]
            .z
            .total_cmp(&splats[b as usize].z)
            .then(a.cmp(&b))
    });
    for idx in order {
        let (ix0, ix1, iy0, iy1) = bounds[idx as usize].unwrap();
        for ty in iy0 / tile..=iy1 / tile {
            for tx in ix0 / tile..=ix1 / tile {
                grid.lists[(ty * grid.tiles_x + tx) as usize].push(idx);
            }
        }
    }
    grid
}

pub(super) struct CompositeImages {
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Front-to-back alpha compositing over a black background, parallel over
/// tiles. Tiles own disjoint pixel blocks, so the result is independent of
/// the worker count.
pub(super) fn composite(
    splats: &[Splat2D],
    tiles: &TileGrid,
    width: u32,
    height: u32,
    opts: &RenderOptions<f64>,
) -> CompositeImages {
    let n_px = (width * height) as usize;
    let mut out = CompositeImages {
        rgb: vec![0.0; n_px * 3],
        alpha: vec![0.0; n_px],
        depth: vec![0.0; n_px],
    };
    let blocks: Vec<_> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tiles.rect(t, width, height);
            let list = &tiles.lists[t];
            let bw = (x1 - x0) as usize;
            let bh = (y1 - y0) as usize;
            let mut rgb = vec![0.0f64; bw * bh * 3];
            let mut alpha = vec![0.0f64; bw * bh];
            let mut depth = vec![0.0f64; bw * bh];
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let pxc = Vector2::new(ix as f64 + 0.5, iy as f64 + 0.5);
                    let mut trans = 1.0f64;
                    let mut acc = Vector3::zeros();
                    let mut depth_num = 0.0f64;
                    for &gi in list {
                        let s = &splats[gi as usize];
                        let (a, _) = splat_alpha(s, &pxc, opts);
                        if a < opts.alpha_min {
                            continue;
                        }
                        let w = a * trans;
                        acc += s.color * w;
                        depth_num += s.z * w;
                        trans *= 1.0 - a;
                    }
                    let i = ((iy - y0) as usize * bw + (ix - x0) as usize) as usize;
                    let a_px = 1.0 - trans;
                    rgb[i * 3] = acc[0];
                    rgb[i * 3 + 1] = acc[1];
                    rgb[i * 3 + 2] = acc[2];
                    alpha[i] = a_px;
                    depth[i] = if a_px > 0.0 { depth_num / a_px } else { 0.0 };
                }
            }
            (x0, y0, bw, bh, rgb, alpha, depth)
        })
        .collect();
    for (x0, y0, bw, bh, rgb, alpha, depth) in blocks {
        for by in 0..bh {
            for bx in 0..bw {
                let src = by * bw + bx;
                let dst = (y0 as usize + by) * width as usize + x0 as usize + bx;
                out.rgb[dst * 3] = rgb[src * 3];
                out.rgb[dst * 3 + 1] = rgb[src * 3 + 1];
                out.rgb[dst * 3 + 2] = rgb[src * 3 + 2];
                out.alpha[dst] = alpha[src];
                out.depth[dst] = depth[src];
            }
        }
    }
    out
}

/// Clamped alpha and the unclamped Gaussian weight at one pixel center.
#[inline]
pub(super) fn splat_alpha(s: &Splat2D, pxc: &Vector2<f64>, opts: &RenderOptions<f64>) -> (f64, f64) {
    let d = pxc - s.mean2d;
    let e = -0.5 * (s.p[(0, 0)] * d[0] * d[0] + 2.0 * s.p[(0, 1)] * d[0] * d[1] + s.p[(1, 1)] * d[1] * d[1]);
    let g = e.exp();
    ((s.alpha * g).min(opts.alpha_max), g)
}

fn narrow_output<S: Scalar>(img: CompositeImages, width: u32, height: u32) -> RenderOutput<S> {
    RenderOutput {
        width,
        height,
        rgb: img.rgb.into_iter().map(sf).collect(),
        alpha: img.alpha.into_iter().map(sf).collect(),
        depth: img.depth.into_iter().map(sf).collect(),
    }
}

fn check_finite<S: Scalar>(vals: impl IntoIterator<Item = S>, index: usize) -> Result<(), SplatError> {
    for v in vals {
        if !v.to_f64().is_finite() {
            return Err(SplatError::NonFiniteInput { index });
        }
    }
    Ok(())
}

/// Renders a pixel-anchored Gaussian set into the target view and saves the
/// forward context for `render_backward`. `source_poses` must hold one pose
/// per reference view (indexed by `source_view`); intrinsics are shared by
/// every view.
pub fn render<S: Scalar>(
    set: &GaussianSet<S>,
    source_poses: &[CameraPose<S>],
    k: &CameraIntrinsics<S>,
    target: &CameraPose<S>,
    opts: &RenderOptions<S>,
) -> Result<(RenderOutput<S>, ForwardContext), SplatError> {
    if source_poses.len() != set.k_ref as usize {
        return Err(SplatError::ShapeError(format!(
            "{} source poses for k_ref {}",
            source_poses.len(),
            set.k_ref
        )));
    }
    let opts64: RenderOptions<f64> = opts.cast();
    let degree = set.sh_degree;
    let target_center = target.center();
    // Source-view ray frames, shared across that view's Gaussians.
    let src_frames: Vec<(Matrix3<S>, Vector3<S>)> = source_poses
        .iter()
        .map(|p| (p.rotation(), p.center()))
        .collect();

    let built: Vec<(Entry, Splat2D, Option<(u32, u32, u32, u32)>)> = set
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| -> Result<_, SplatError> {
            check_finite(
                [g.d, g.opacity]
                    .into_iter()
                    .chain(g.q.iter().copied())
                    .chain(g.scale.iter().copied())
                    .chain(g.sh.iter().copied()),
                i,
            )?;
            let qn = g.q.norm();
            if qn.to_f64() < 1e-12 {
                return Err(SplatError::DegenerateRotation { index: i });
            }
            let d_act = softplus(g.d);
            let sc = g.scale.map(|v| v.exp());
            let alpha = sigmoid(g.opacity);
            check_finite(sc.iter().copied(), i)?;
            if alpha.to_f64() < opts64.alpha_min {
                // Peak contribution is already below the cutoff.
                return Ok((Entry::excluded(), Splat2D::zeroed(), None));
            }
            // Ray through the source pixel under the current camera estimate.
            let (rot_s, center_s) = &src_frames[g.source_view as usize];
            let u_px = g.source_pixel % set.width;
            let v_px = g.source_pixel / set.width;
            let half = sf::<S>(0.5);
            let vcam = Vector3::new(
                (sf::<S>(u_px as f64) + half - k.cx) / k.fx,
                (sf::<S>(v_px as f64) + half - k.cy) / k.fy,
                S::one(),
            );
            let vnorm = vcam.norm();
            let ucam = vcam / vnorm;
            let wdir = rot_s.transpose() * ucam;
            let mean = center_s + wdir * d_act;
            let rot = quat_to_rot(&g.q).map_err(|_| SplatError::DegenerateRotation { index: i })?;
            let sigma = covariance_from_rot(&rot, &sc);
            let Some(proj) = project_gaussian(k, target, &mean, &sigma, opts) else {
                return Ok((Entry::excluded(), Splat2D::zeroed(), None));
            };
            let rel = mean - target_center;
            let nv = rel.norm();
            let viewdir = rel / nv;
            let rgb_raw = eval_sh_raw(&g.sh, &viewdir, degree);
            check_finite(rgb_raw.iter().copied().chain(proj.mean2d.iter().copied()), i)?;

            let w_rot = target.rotation();
            let sigma_cam = w_rot * sigma * w_rot.transpose();
            let entry = Entry {
                included: true,
                d_raw: g.d.to_f64(),
                d_act: d_act.to_f64(),
                q: g.q.map(Scalar::to_f64),
                sc: sc.map(Scalar::to_f64),
                alpha: alpha.to_f64(),
                sh: g.sh.iter().map(|v| v.to_f64()).collect(),
                view: g.source_view as usize,
                vcam: vcam.map(Scalar::to_f64),
                vnorm: vnorm.to_f64(),
                ucam: ucam.map(Scalar::to_f64),
                wdir: wdir.map(Scalar::to_f64),
                rot: rot.map(Scalar::to_f64),
                sigma_cam: sigma_cam.map(Scalar::to_f64),
                mean_cam: proj.mean_cam.map(Scalar::to_f64),
                mean2d: proj.mean2d.map(Scalar::to_f64),
                jac: proj.jac.map(Scalar::to_f64),
                viewdir: viewdir.map(Scalar::to_f64),
                nv: nv.to_f64(),
                rgb_raw: rgb_raw.map(Scalar::to_f64),
            };
            let cov2d = proj.cov2d.map(Scalar::to_f64);
            let splat = Splat2D {
                z: proj.depth.to_f64(),
                mean2d: entry.mean2d,
                p: invert_cov2d(&cov2d),
                alpha: entry.alpha,
                color: entry.rgb_raw.map(|v| v.clamp(0.0, 1.0)),
            };
            let bounds = pixel_bounds(&splat.mean2d, &cov2d, splat.alpha, k.width, k.height, &opts64);
            Ok((entry, splat, bounds))
        })
        .collect::<Result<_, _>>()?;

    let mut entries = Vec::with_capacity(built.len());
    let mut splats = Vec::with_capacity(built.len());
    let mut bounds = Vec::with_capacity(built.len());
    for (e, s, b) in built {
        entries.push(e);
        splats.push(s);
        bounds.push(b);
    }
    let tiles = build_tiles(&splats, &bounds, k.width, k.height, opts.tile_size);
    let images = composite(&splats, &tiles, k.width, k.height, &opts64);
    let ctx = ForwardContext {
        width: k.width,
        height: k.height,
        sh_degree: degree,
        n_views: source_poses.len(),
        intr: [k.fx.to_f64(), k.fy.to_f64(), k.cx.to_f64(), k.cy.to_f64()],
        target_rot: target.rotation().map(Scalar::to_f64),
        source_rots: src_frames.iter().map(|(r, _)| r.map(Scalar::to_f64)).collect(),
        entries,
        splats,
        tiles,
        opts: opts64,
    };
    Ok((narrow_output(images, k.width, k.height), ctx))
}

/// Forward-only render of free-floating, already-activated Gaussians. Used
/// for authored ground-truth scenes; shares the compositing core with
/// `render`.
pub fn render_world<S: Scalar>(
    gaussians: &[WorldGaussian<S>],
    k: &CameraIntrinsics<S>,
    pose: &CameraPose<S>,
    opts: &RenderOptions<S>,
) -> Result<RenderOutput<S>, SplatError> {
    let opts64: RenderOptions<f64> = opts.cast();
    let center = pose.center();
    let built: Vec<(Splat2D, Option<(u32, u32, u32, u32)>)> = gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| -> Result<_, SplatError> {
            check_finite(
                [g.opacity]
                    .into_iter()
                    .chain(g.mean.iter().copied())
                    .chain(g.quat.iter().copied())
                    .chain(g.scale.iter().copied())
                    .chain(g.sh.iter().copied()),
                i,
            )?;
            let op = g.opacity.to_f64();
            if !(op > 0.0 && op <= 1.0) {
                return Err(SplatError::ShapeError(format!(
                    "Gaussian {i} opacity {op} outside (0, 1]"
                )));
            }
            let degree = (0..=3u32)
                .find(|&d| basis_len(d) * 3 == g.sh.len())
                .ok_or_else(|| {
                    SplatError::ShapeError(format!("Gaussian {i} has {} SH values", g.sh.len()))
                })?;
            if op < opts64.alpha_min {
                return Ok((Splat2D::zeroed(), None));
            }
            let rot = quat_to_rot(&g.quat).map_err(|_| SplatError::DegenerateRotation { index: i })?;
            let sigma = covariance_from_rot(&rot, &g.scale);
            let Some(proj) = project_gaussian(k, pose, &g.mean, &sigma, opts) else {
                return Ok((Splat2D::zeroed(), None));
            };
            let viewdir = (g.mean - center).normalize();
            let rgb = eval_sh_raw(&g.sh, &viewdir, degree).map(|v| v.clamp(S::zero(), S::one()));
            let cov2d = proj.cov2d.map(Scalar::to_f64);
            let splat = Splat2D {
                z: proj.depth.to_f64(),
                mean2d: proj.mean2d.map(Scalar::to_f64),
                p: invert_cov2d(&cov2d),
                alpha: op,
                color: rgb.map(Scalar::to_f64),
            };
            let bounds = pixel_bounds(&splat.mean2d, &cov2d, op, k.width, k.height, &opts64);
            Ok((splat, bounds))
        })
        .collect::<Result<_, _>>()?;
    let splats: Vec<Splat2D> = built.iter().map(|(s, _)| *s).collect();
    let bounds: Vec<_> = built.iter().map(|(_, b)| *b).collect();
    let tiles = build_tiles(&splats, &bounds, k.width, k.height, opts.tile_size);
    let images = composite(&splats, &tiles, k.width, k.height, &opts64);
    Ok(narrow_output(images, k.width, k.height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::{logit, softplus_inv, PixelGaussian};
    use crate::splat::sh::SH_C0;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k16() -> CameraIntrinsics<f64> {
        // Principal point on a pixel center so an on-axis Gaussian peaks with
        // exactly zero screen offset.
        CameraIntrinsics::new(20.0, 20.0, 8.5, 8.5, 16, 16).unwrap()
    }

    fn white_sh() -> Vec<f64> {
        vec![1.0 / SH_C0; 3]
    }

    #[test]
    fn empty_set_renders_black() {
        let set = GaussianSet::<f64>::new(Vec::new(), 0, 1, 16, 16).unwrap();
        let (out, _) = render(
            &set,
            &[CameraPose::identity()],
            &k16(),
            &CameraPose::identity(),
            &RenderOptions::default(),
        )
        .unwrap();
        assert!(out.rgb.iter().all(|&v| v == 0.0));
        assert!(out.alpha.iter().all(|&v| v == 0.0));
        assert!(out.depth.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_on_axis_gaussian_hits_alpha_max() {
        let g = WorldGaussian {
            mean: Vector3::new(0.0, 0.0, 2.0),
            quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            scale: Vector3::new(5.0, 5.0, 5.0),
            sh: white_sh(),
            opacity: 1.0,
        };
        let out = render_world(&[g], &k16(), &CameraPose::identity(), &RenderOptions::default()).unwrap();
        let c = out.pixel_rgb(8, 8);
        // δ = 0 at the center pixel, so a = min(0.99, 1·1) exactly.
        assert_eq!(c, Vector3::new(0.99, 0.99, 0.99));
        assert_eq!(out.alpha[(8 * 16 + 8) as usize], 0.99);
        assert_eq!(out.depth[(8 * 16 + 8) as usize], 2.0);
    }

    #[test]
    fn two_coincident_gaussians_composite_exactly() {
        let mut red = WorldGaussian {
            mean: Vector3::new(0.0, 0.0, 2.0),
            quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            scale: Vector3::new(5.0, 5.0, 5.0),
            sh: vec![1.0 / SH_C0, 0.0, 0.0],
            opacity: 0.5,
        };
        let mut green = red.clone();
        green.mean = Vector3::new(0.0, 0.0, 3.0);
        green.sh = vec![0.0, 1.0 / SH_C0, 0.0];
        green.opacity = 0.99;
        // Scale the back Gaussian so both cover the full image.
        green.scale *= 1.5;
        red.scale *= 1.0;
        let out = render_world(
            &[green.clone(), red.clone()],
            &k16(),
            &CameraPose::identity(),
            &RenderOptions::default(),
        )
        .unwrap();
        let c = out.pixel_rgb(8, 8);
        assert!((c[0] - 0.5).abs() < 1e-12, "front red term");
        assert!((c[1] - 0.5 * 0.99).abs() < 1e-12, "occluded green term");
        assert_eq!(c[2], 0.0);
        let a = 0.5 + 0.5 * 0.99;
        assert!((out.alpha[(8 * 16 + 8) as usize] - a).abs() < 1e-12);
        let d = (2.0 * 0.5 + 3.0 * 0.5 * 0.99) / a;
        assert!((out.depth[(8 * 16 + 8) as usize] - d).abs() < 1e-12);
    }

    fn random_set(seed: u64, n: usize) -> (GaussianSet<f64>, Vec<CameraPose<f64>>, CameraPose<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..n)
            .map(|_| PixelGaussian {
                d: softplus_inv(rng.random_range(1.2..2.5)),
                q: Vector4::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ) + Vector4::new(2.0, 0.0, 0.0, 0.0),
                sh: (0..3).map(|_| rng.random_range(0.1..0.9) / SH_C0).collect(),
                scale: Vector3::new(
                    rng.random_range(-2.0..-0.5),
                    rng.random_range(-2.0..-0.5),
                    rng.random_range(-2.0..-0.5),
                ),
                opacity: logit(rng.random_range(0.2..0.9)),
                source_view: rng.random_range(0..2),
                source_pixel: rng.random_range(0..256),
            })
            .collect();
        let set = GaussianSet::new(gaussians, 0, 2, 16, 16).unwrap();
        let sources = vec![
            CameraPose::identity(),
            CameraPose::new(Vector4::new(1.0, 0.02, -0.01, 0.03), Vector3::new(0.1, 0.0, -0.05)).unwrap(),
        ];
        let target =
            CameraPose::new(Vector4::new(1.0, -0.02, 0.03, 0.01), Vector3::new(-0.08, 0.04, 0.1)).unwrap();
        (set, sources, target)
    }

    #[test]
    fn output_is_invariant_to_input_order() {
        let (set, sources, target) = random_set(3, 24);
        let k = k16();
        let opts = RenderOptions::default();
        let (a, _) = render(&set, &sources, &k, &target, &opts).unwrap();
        let mut rev = set.clone();
        rev.gaussians.reverse();
        let (b, _) = render(&rev, &sources, &k, &target, &opts).unwrap();
        // Depths are generic (no exact ties), so the sorted sequence and
        // every composited sum are bitwise identical.
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn alpha_bounded_and_rgb_premultiplied() {
        for seed in 0..4 {
            let (set, sources, target) = random_set(seed, 40);
            let (out, _) = render(&set, &sources, &k16(), &target, &RenderOptions::default()).unwrap();
            for px in 0..256 {
                let a = out.alpha[px];
                assert!((0.0..=1.0).contains(&a));
                for ch in 0..3 {
                    let v = out.rgb[px * 3 + ch];
                    assert!(v >= 0.0 && v <= a + 1e-12, "rgb {v} vs alpha {a}");
                }
            }
        }
    }

    #[test]
    fn non_finite_parameter_is_reported_with_its_index() {
        let (mut set, sources, target) = random_set(5, 8);
        set.gaussians[5].scale[1] = f64::NAN;
        let err = render(&set, &sources, &k16(), &target, &RenderOptions::default()).unwrap_err();
        match err {
            SplatError::NonFiniteInput { index } => assert_eq!(index, 5),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn source_pose_count_must_match_k_ref() {
        let (set, _, target) = random_set(0, 4);
        let err = render(
            &set,
            &[CameraPose::identity()],
            &k16(),
            &target,
            &RenderOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SplatError::ShapeError(_)));
    }

    #[test]
    fn pixel_anchored_gaussian_saturates_center() {
        // Same-on-axis construction through the differentiable path: source
        // ray through the principal point, target identical to source.
        let g = PixelGaussian {
            d: softplus_inv(2.0),
            q: Vector4::new(1.0, 0.0, 0.0, 0.0),
            sh: white_sh(),
            scale: Vector3::new(5.0f64.ln(), 5.0f64.ln(), 5.0f64.ln()),
            opacity: 10.0,
            source_view: 0,
            source_pixel: 8 * 16 + 8,
        };
        let set = GaussianSet::new(vec![g], 0, 1, 16, 16).unwrap();
        let (out, ctx) = render(
            &set,
            &[CameraPose::identity()],
            &k16(),
            &CameraPose::identity(),
            &RenderOptions::default(),
        )
        .unwrap();
        // sigmoid(10)·1 > 0.99, so the clamp pins the center contribution.
        assert_eq!(out.pixel_rgb(8, 8), Vector3::new(0.99, 0.99, 0.99));
        assert_eq!(out.depth[(8 * 16 + 8) as usize], 2.0);
        assert!(ctx.entries[0].included);
        assert!((ctx.entries[0].mean_cam - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
    }
}
