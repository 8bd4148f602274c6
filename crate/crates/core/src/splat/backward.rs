//! Reverse-mode differentiation of `render`.
//!
//! Replays the per-pixel compositing from the saved forward context (same
//! f64 inputs, same operation order, so the replayed weights are bitwise
//! identical), accumulates per-Gaussian screen-space adjoints, then chains
//! each Gaussian once through projection, covariance, SH shading, and the
//! ray anchoring back to raw parameters, both camera poses (left-perturbed
//! SE(3) tangent), and the shared intrinsics.
//!
//! Tiles run in parallel; tile results are folded in a fixed tile order so
//! the bundle is bitwise deterministic for any worker count.

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::render::{splat_alpha, Entry, ForwardContext, Splat2D};
use super::sh::{basis_len, sh_basis, sh_basis_grad};
use super::{sigmoid, GradientBundle, SplatError};
use crate::scalar::Scalar;

/// Adjoints of one Gaussian's screen-space quantities, summed over pixels.
#[derive(Clone)]
struct ScreenAdjoint {
    mean2d: Vector2<f64>,
    /// Adjoint of the inverse 2D covariance P.
    p: Matrix2<f64>,
    alpha: f64,
    color: Vector3<f64>,
    z: f64,
}

impl ScreenAdjoint {
    fn zero() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            p: Matrix2::zeros(),
            alpha: 0.0,
            color: Vector3::zeros(),
            z: 0.0,
        }
    }

    fn is_zero(&self) -> bool {
        self.alpha == 0.0
            && self.z == 0.0
            && self.mean2d == Vector2::zeros()
            && self.color == Vector3::zeros()
            && self.p == Matrix2::zeros()
    }
}

struct ParamGrad {
    index: u32,
    d: f64,
    q: [f64; 4],
    sh: Vec<f64>,
    scale: [f64; 3],
    opacity: f64,
}

struct TileOut {
    params: Vec<ParamGrad>,
    source_poses: Vec<[f64; 6]>,
    target_pose: [f64; 6],
    intrinsics: [f64; 4],
}

/// ∂R/∂q̄ for a unit quaternion (w, x, y, z).
fn drot_dq(qbar: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (qbar[0], qbar[1], qbar[2], qbar[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// ⟨A, [φ]×⟩ as a vector in φ.
fn skew_inner(a: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        a[(2, 1)] - a[(1, 2)],
        a[(0, 2)] - a[(2, 0)],
        a[(1, 0)] - a[(0, 1)],
    )
}

/// Chains one Gaussian's screen adjoints to raw parameters and cameras.
#[allow(clippy::too_many_arguments)]
fn gaussian_chain(
    ctx: &ForwardContext,
    e: &Entry,
    s: &Splat2D,
    adj: &ScreenAdjoint,
    index: u32,
    src: &mut [[f64; 6]],
    tgt: &mut [f64; 6],
    intr: &mut [f64; 4],
) -> ParamGrad {
    let [fx, fy, ..] = ctx.intr;
    let w_rot = &ctx.target_rot;
    let sh_n = basis_len(ctx.sh_degree);
    let mut out = ParamGrad {
        index,
        d: 0.0,
        q: [0.0; 4],
        sh: vec![0.0; sh_n * 3],
        scale: [0.0; 3],
        opacity: adj.alpha * e.alpha * (1.0 - e.alpha),
    };

    // P = cov2d⁻¹ → Ĉ = −P·P̂·P (all symmetric).
    let c_hat = -(s.p * adj.p * s.p);
    // cov2d = J·Σ_cam·Jᵀ + κI.
    let sigma_cam_hat = e.jac.transpose() * c_hat * e.jac;
    let j_hat = (c_hat + c_hat.transpose()) * e.jac * e.sigma_cam;
    // Σ_cam left-perturbation: dΣ_cam = [φ]×Σ_cam − Σ_cam[φ]×.
    let b = sigma_cam_hat * e.sigma_cam - e.sigma_cam * sigma_cam_hat;
    let phi_cov = skew_inner(&b);
    for k in 0..3 {
        tgt[3 + k] += phi_cov[k];
    }
    // Σ_cam = W·Σ·Wᵀ.
    let sigma_hat = w_rot.transpose() * sigma_cam_hat * w_rot;

    // Σ = R·diag(sc²)·Rᵀ.
    let d_mat = Matrix3::from_diagonal(&e.sc.map(|v| v * v));
    let r_hat = (sigma_hat + sigma_hat.transpose()) * e.rot * d_mat;
    let m = e.rot.transpose() * sigma_hat * e.rot;
    for k in 0..3 {
        // sc_k = exp(raw): d(sc_k²)/draw = 2·sc_k².
        out.scale[k] = 2.0 * e.sc[k] * e.sc[k] * m[(k, k)];
    }
    // R(q̄), q̄ = q/|q|.
    let qn = e.q.norm();
    let qbar = e.q / qn;
    let dr = drot_dq(&qbar);
    let mut qbar_hat = Vector4::zeros();
    for k in 0..4 {
        qbar_hat[k] = r_hat.component_mul(&dr[k]).sum();
    }
    let q_hat = (Matrix4::identity() - qbar * qbar.transpose()) * qbar_hat / qn;
    for k in 0..4 {
        out.q[k] = q_hat[k];
    }

    // Projection Jacobian entries and mean2d back to the camera-frame mean
    // and the intrinsics.
    let (x, y, z) = (e.mean_cam[0], e.mean_cam[1], e.mean_cam[2]);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let mc_hat = Vector3::new(
        j_hat[(0, 2)] * (-fx * iz2) + adj.mean2d[0] * fx * iz,
        j_hat[(1, 2)] * (-fy * iz2) + adj.mean2d[1] * fy * iz,
        j_hat[(0, 0)] * (-fx * iz2)
            + j_hat[(1, 1)] * (-fy * iz2)
            + j_hat[(0, 2)] * (2.0 * fx * x * iz2 * iz)
            + j_hat[(1, 2)] * (2.0 * fy * y * iz2 * iz)
            - adj.mean2d[0] * fx * x * iz2
            - adj.mean2d[1] * fy * y * iz2
            + adj.z,
    );
    intr[0] += j_hat[(0, 0)] * iz + j_hat[(0, 2)] * (-x * iz2) + adj.mean2d[0] * x * iz;
    intr[1] += j_hat[(1, 1)] * iz + j_hat[(1, 2)] * (-y * iz2) + adj.mean2d[1] * y * iz;
    intr[2] += adj.mean2d[0];
    intr[3] += adj.mean2d[1];

    // Shading: per-channel clamp gate, then SH basis and view direction.
    let mut c_hat_rgb = adj.color;
    for ch in 0..3 {
        if !(0.0..=1.0).contains(&e.rgb_raw[ch]) {
            c_hat_rgb[ch] = 0.0;
        }
    }
    let basis = sh_basis(ctx.sh_degree, &e.viewdir);
    let basis_grad = sh_basis_grad(ctx.sh_degree, &e.viewdir);
    let mut vd_hat = Vector3::zeros();
    for l in 0..sh_n {
        let mut band = 0.0;
        for ch in 0..3 {
            out.sh[l * 3 + ch] = c_hat_rgb[ch] * basis[l];
            band += c_hat_rgb[ch] * e.sh[l * 3 + ch];
        }
        vd_hat += basis_grad[l] * band;
    }
    // viewdir = (mean − c_t)/|mean − c_t|; the target center is invariant to
    // the rotational tangent at first order, so only ρ receives a term.
    let rel_hat = (vd_hat - e.viewdir * e.viewdir.dot(&vd_hat)) / e.nv;
    let mut mean_hat = rel_hat;
    let ct_hat = -rel_hat;
    let rho_ct = -(w_rot * ct_hat);
    for k in 0..3 {
        tgt[k] += rho_ct[k];
    }

    // mean_cam = W·mean + t.
    mean_hat += w_rot.transpose() * mc_hat;
    let phi_mean = e.mean_cam.cross(&mc_hat);
    for k in 0..3 {
        tgt[k] += mc_hat[k];
        tgt[3 + k] += phi_mean[k];
    }

    // mean = origin + d·wdir; origin and wdir belong to the source camera.
    let w_hat = mean_hat * e.d_act;
    out.d = mean_hat.dot(&e.wdir) * sigmoid(e.d_raw);
    let r_s = &ctx.source_rots[e.view];
    let o_hat_world = r_s * mean_hat;
    let u_hat = r_s * w_hat;
    let phi_src = -e.ucam.cross(&u_hat);
    let sp = &mut src[e.view];
    for k in 0..3 {
        sp[k] -= o_hat_world[k];
        sp[3 + k] += phi_src[k];
    }
    // ucam = vcam/|vcam|, vcam = ((u+½−cx)/fx, (v+½−cy)/fy, 1).
    let v_hat = (u_hat - e.ucam * e.ucam.dot(&u_hat)) / e.vnorm;
    intr[0] += v_hat[0] * (-e.vcam[0] / fx);
    intr[1] += v_hat[1] * (-e.vcam[1] / fy);
    intr[2] += v_hat[0] * (-1.0 / fx);
    intr[3] += v_hat[1] * (-1.0 / fy);
    out
}

/// Exact adjoints of `Σ grad_rgb⊙rgb + Σ grad_depth⊙depth` with respect to
/// every input of the `render` call that produced `ctx`.
pub fn render_backward<S: Scalar>(
    ctx: &ForwardContext,
    grad_rgb: &[S],
    grad_depth: Option<&[S]>,
) -> Result<GradientBundle, SplatError> {
    let n_px = (ctx.width * ctx.height) as usize;
    if grad_rgb.len() != n_px * 3 {
        return Err(SplatError::ShapeError(format!(
            "grad_rgb has {} values, image needs {}",
            grad_rgb.len(),
            n_px * 3
        )));
    }
    if let Some(gd) = grad_depth {
        if gd.len() != n_px {
            return Err(SplatError::ShapeError(format!(
                "grad_depth has {} values, image needs {n_px}",
                gd.len()
            )));
        }
    }
    let sh_n = basis_len(ctx.sh_degree);
    let mut bundle = GradientBundle::zeros(ctx.entries.len(), sh_n, ctx.n_views);

    let tile_outs: Vec<TileOut> = (0..ctx.tiles.lists.len())
        .into_par_iter()
        .map(|t| backward_tile(ctx, t, grad_rgb, grad_depth))
        .collect();

    for to in tile_outs {
        for pg in to.params {
            let i = pg.index as usize;
            bundle.d[i] += pg.d;
            bundle.opacity[i] += pg.opacity;
            for k in 0..4 {
                bundle.q[i * 4 + k] += pg.q[k];
            }
            for k in 0..3 {
                bundle.scale[i * 3 + k] += pg.scale[k];
            }
            for (k, v) in pg.sh.iter().enumerate() {
                bundle.sh[i * sh_n * 3 + k] += v;
            }
        }
        for (a, b) in bundle.source_poses.iter_mut().zip(&to.source_poses) {
            for k in 0..6 {
                a[k] += b[k];
            }
        }
        for k in 0..6 {
            bundle.target_pose[k] += to.target_pose[k];
        }
        for k in 0..4 {
            bundle.intrinsics[k] += to.intrinsics[k];
        }
    }
    Ok(bundle)
}

fn backward_tile<S: Scalar>(
    ctx: &ForwardContext,
    t: usize,
    grad_rgb: &[S],
    grad_depth: Option<&[S]>,
) -> TileOut {
    let list = &ctx.tiles.lists[t];
    let (x0, y0, x1, y1) = ctx.tiles.rect(t, ctx.width, ctx.height);
    let mut adjoints = vec![ScreenAdjoint::zero(); list.len()];
    // Contributions of one pixel, front to back: (position in list, a, g, T).
    let mut contribs: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(list.len());

    for iy in y0..y1 {
        for ix in x0..x1 {
            let px = (iy * ctx.width + ix) as usize;
            let gr = Vector3::new(
                grad_rgb[px * 3].to_f64(),
                grad_rgb[px * 3 + 1].to_f64(),
                grad_rgb[px * 3 + 2].to_f64(),
            );
            let gd = grad_depth.map_or(0.0, |g| g[px].to_f64());
            if gr == Vector3::zeros() && gd == 0.0 {
                continue;
            }
            let pxc = Vector2::new(ix as f64 + 0.5, iy as f64 + 0.5);
            // Replay of the forward walk: identical inputs and order.
            contribs.clear();
            let mut trans = 1.0f64;
            let mut depth_num = 0.0f64;
            for (pos, &gi) in list.iter().enumerate() {
                let s = &ctx.splats[gi as usize];
                let (a, g) = splat_alpha(s, &pxc, &ctx.opts);
                if a < ctx.opts.alpha_min {
                    continue;
                }
                contribs.push((pos, a, g, trans));
                depth_num += s.z * a * trans;
                trans *= 1.0 - a;
            }
            let t_final = trans;
            let alpha_px = 1.0 - t_final;
            let depth_px = if alpha_px > 0.0 { depth_num / alpha_px } else { 0.0 };

            // Back-to-front sweep with suffix sums.
            let mut s_rgb_after = Vector3::zeros();
            let mut s_z_after = 0.0f64;
            for &(pos, a, g, t_i) in contribs.iter().rev() {
                let gi = list[pos] as usize;
                let s = &ctx.splats[gi];
                let adj = &mut adjoints[pos];
                let w = a * t_i;
                adj.color += gr * w;
                let one_m = 1.0 - a;
                let mut da = gr.dot(&s.color) * t_i - gr.dot(&s_rgb_after) / one_m;
                if gd != 0.0 && alpha_px > 0.0 {
                    da += gd * (s.z * t_i - (s_z_after + depth_px * t_final) / one_m) / alpha_px;
                    adj.z += gd * w / alpha_px;
                }
                // a = min(a_max, α·g): the clamp gates α and the footprint.
                if s.alpha * g <= ctx.opts.alpha_max {
                    adj.alpha += da * g;
                    let e_hat = da * s.alpha * g;
                    let delta = pxc - s.mean2d;
                    adj.mean2d += (s.p * delta) * e_hat;
                    adj.p += (delta * delta.transpose()) * (-0.5 * e_hat);
                }
                s_rgb_after += s.color * w;
                s_z_after += s.z * w;
            }
        }
    }

    let mut out = TileOut {
        params: Vec::new(),
        source_poses: vec![[0.0; 6]; ctx.n_views],
        target_pose: [0.0; 6],
        intrinsics: [0.0; 4],
    };
    for (pos, &gi) in list.iter().enumerate() {
        if adjoints[pos].is_zero() {
            continue;
        }
        let e = &ctx.entries[gi as usize];
        // Tile lists are built from bounded splats only.
        debug_assert!(e.included);
        let pg = gaussian_chain(
            ctx,
            e,
            &ctx.splats[gi as usize],
            &adjoints[pos],
            gi,
            &mut out.source_poses,
            &mut out.target_pose,
            &mut out.intrinsics,
        );
        out.params.push(pg);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use crate::splat::sh::SH_C0;
    use crate::splat::{logit, render, softplus_inv, GaussianSet, PixelGaussian, RenderOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(
        n: usize,
        seed: u64,
    ) -> (GaussianSet<f64>, Vec<CameraPose<f64>>, CameraPose<f64>, CameraIntrinsics<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..n)
            .map(|_| PixelGaussian {
                d: softplus_inv(rng.random_range(1.6..2.2)),
                q: Vector4::new(
                    1.0 + rng.random_range(-0.1..0.1),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ),
                sh: (0..3).map(|_| rng.random_range(0.25..0.7) / SH_C0).collect(),
                scale: Vector3::new(
                    rng.random_range(-0.1..0.2),
                    rng.random_range(-0.1..0.2),
                    rng.random_range(-0.1..0.2),
                ),
                opacity: logit(rng.random_range(0.5..0.85)),
                source_view: 0,
                source_pixel: rng.random_range(0..256),
            })
            .collect();
        let set = GaussianSet::new(gaussians, 0, 1, 16, 16).unwrap();
        let sources = vec![CameraPose::identity()];
        let target = CameraPose::new(
            Vector4::new(1.0, 0.01, -0.02, 0.015),
            Vector3::new(0.05, -0.03, 0.04),
        )
        .unwrap();
        let k = CameraIntrinsics::new(20.0, 21.0, 8.0, 8.3, 16, 16).unwrap();
        (set, sources, target, k)
    }

    #[test]
    fn zero_gradient_in_zero_gradient_out() {
        let (set, sources, target, k) = scene(6, 1);
        let opts = RenderOptions::default();
        let (_, ctx) = render(&set, &sources, &k, &target, &opts).unwrap();
        let bundle = render_backward(&ctx, &vec![0.0f64; 16 * 16 * 3], None).unwrap();
        assert!(bundle.d.iter().all(|&v| v == 0.0));
        assert!(bundle.q.iter().all(|&v| v == 0.0));
        assert!(bundle.sh.iter().all(|&v| v == 0.0));
        assert!(bundle.scale.iter().all(|&v| v == 0.0));
        assert!(bundle.opacity.iter().all(|&v| v == 0.0));
        assert_eq!(bundle.target_pose, [0.0; 6]);
        assert_eq!(bundle.intrinsics, [0.0; 4]);
    }

    #[test]
    fn brighter_gaussian_wants_more_opacity() {
        // Lone bright Gaussian, positive grad_rgb everywhere: increasing
        // opacity increases the loss, so the adjoint must be positive.
        let (set, sources, target, k) = scene(1, 2);
        let opts = RenderOptions::default();
        let (_, ctx) = render(&set, &sources, &k, &target, &opts).unwrap();
        let bundle = render_backward(&ctx, &vec![1.0f64; 16 * 16 * 3], None).unwrap();
        assert!(
            bundle.opacity[0] > 0.0,
            "opacity adjoint {} not positive",
            bundle.opacity[0]
        );
    }

    #[test]
    fn depth_gradient_matches_finite_differences() {
        let (set, sources, target, k) = scene(4, 3);
        let opts = RenderOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gd: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |s: &GaussianSet<f64>| -> f64 {
            let (out, _) = render(s, &sources, &k, &target, &opts).unwrap();
            out.depth.iter().zip(&gd).map(|(a, b)| a * b).sum()
        };
        let (_, ctx) = render(&set, &sources, &k, &target, &opts).unwrap();
        let bundle = render_backward(&ctx, &vec![0.0f64; 16 * 16 * 3], Some(&gd)).unwrap();
        let h = 1e-5;
        for i in 0..set.len() {
            let mut plus = set.clone();
            let mut minus = set.clone();
            plus.gaussians[i].d += h;
            minus.gaussians[i].d -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = bundle.d[i];
            assert!(
                (an - fd).abs() / fd.abs().max(1e-3) < 1e-5,
                "depth d-grad {an} vs fd {fd} on Gaussian {i}"
            );
            let mut plus = set.clone();
            let mut minus = set.clone();
            plus.gaussians[i].opacity += h;
            minus.gaussians[i].opacity -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = bundle.opacity[i];
            assert!(
                (an - fd).abs() / fd.abs().max(1e-3) < 1e-5,
                "depth opacity-grad {an} vs fd {fd} on Gaussian {i}"
            );
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (set, sources, target, k) = scene(2, 4);
        let (_, ctx) = render(&set, &sources, &k, &target, &RenderOptions::default()).unwrap();
        assert!(render_backward(&ctx, &vec![0.0f64; 7], None).is_err());
        let ok_rgb = vec![0.0f64; 16 * 16 * 3];
        assert!(render_backward(&ctx, &ok_rgb, Some(&vec![0.0f64; 3])).is_err());
    }
}
