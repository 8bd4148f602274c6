//! Brute-force reference renderer.
//!
//! Same rendering equation as `render`, written independently: no tiling, no
//! influence-radius culling, a serial per-pixel loop over every Gaussian in
//! sorted depth order, and its own activation, quaternion, projection, and
//! compositing expressions. It shares only the public domain types, the SH
//! evaluation, and the pinned constants, so agreement between the two paths
//! checks the tiled implementation rather than restating it.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::sh::eval_sh_raw;
use super::{GaussianSet, RenderOptions, RenderOutput, SplatError};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::scalar::{sf, Scalar};

struct FlatSplat {
    z: f64,
    mean2d: Vector2<f64>,
    inv_cov: Matrix2<f64>,
    alpha: f64,
    color: Vector3<f64>,
}

fn softplus_bf(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sigmoid_bf(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn quat_rot_bf(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let n = (w * w + x * x + y * y + z * z).sqrt();
    let (w, x, y, z) = (w / n, x / n, y / n, z / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Reference render for small scenes (≤ 10⁴ Gaussians). All internal math
/// runs at f64 whatever the working precision of the inputs.
pub fn render_bruteforce<S: Scalar>(
    set: &GaussianSet<S>,
    source_poses: &[CameraPose<S>],
    k: &CameraIntrinsics<S>,
    target: &CameraPose<S>,
    opts: &RenderOptions<S>,
) -> Result<RenderOutput<S>, SplatError> {
    if source_poses.len() != set.k_ref as usize {
        return Err(SplatError::ShapeError(format!(
            "{} source poses for k_ref {}",
            source_poses.len(),
            set.k_ref
        )));
    }
    let o: RenderOptions<f64> = opts.cast();
    let kf: CameraIntrinsics<f64> = k.cast();
    let tgt: CameraPose<f64> = target.cast();
    let w_t = tgt.rotation();
    let t_t = tgt.trans;
    let c_t = tgt.center();
    let sources: Vec<CameraPose<f64>> = source_poses.iter().map(CameraPose::cast).collect();

    let mut flats: Vec<FlatSplat> = Vec::new();
    for (i, g) in set.gaussians.iter().enumerate() {
        let d_raw = g.d.to_f64();
        let op_raw = g.opacity.to_f64();
        let q: Vec<f64> = g.q.iter().map(|v| v.to_f64()).collect();
        let s_raw: Vec<f64> = g.scale.iter().map(|v| v.to_f64()).collect();
        let sh: Vec<f64> = g.sh.iter().map(|v| v.to_f64()).collect();
        for v in [d_raw, op_raw].iter().chain(&q).chain(&s_raw).chain(&sh) {
            if !v.is_finite() {
                return Err(SplatError::NonFiniteInput { index: i });
            }
        }
        let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if qn < 1e-12 {
            return Err(SplatError::DegenerateRotation { index: i });
        }
        let sc = Vector3::new(s_raw[0].exp(), s_raw[1].exp(), s_raw[2].exp());
        if !sc.iter().all(|v| v.is_finite()) {
            return Err(SplatError::NonFiniteInput { index: i });
        }
        let alpha = sigmoid_bf(op_raw);
        let d_act = softplus_bf(d_raw);

        // Ray through the source pixel center.
        let sp = &sources[g.source_view as usize];
        let u_px = (g.source_pixel % set.width) as f64 + 0.5;
        let v_px = (g.source_pixel / set.width) as f64 + 0.5;
        let dir_cam = Vector3::new((u_px - kf.cx) / kf.fx, (v_px - kf.cy) / kf.fy, 1.0);
        let dir_world = sp.rotation().transpose() * dir_cam / dir_cam.norm();
        let mean = sp.center() + dir_world * d_act;

        let cam = w_t * mean + t_t;
        if cam[2] <= o.near {
            continue;
        }
        let z = cam[2];
        let mean2d = Vector2::new(kf.fx * cam[0] / z + kf.cx, kf.fy * cam[1] / z + kf.cy);

        // Camera-frame covariance first, then the screen-plane slice.
        let rq = quat_rot_bf(q[0], q[1], q[2], q[3]);
        let sigma = rq * Matrix3::from_diagonal(&sc.map(|v| v * v)) * rq.transpose();
        let sigma_cam = w_t * sigma * w_t.transpose();
        let jac = Matrix2x3::new(
            kf.fx / z,
            0.0,
            -kf.fx * cam[0] / (z * z),
            0.0,
            kf.fy / z,
            -kf.fy * cam[1] / (z * z),
        );
        let mut cov2d = jac * sigma_cam * jac.transpose();
        cov2d[(0, 0)] += o.kappa;
        cov2d[(1, 1)] += o.kappa;
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        let inv_cov = Matrix2::new(
            cov2d[(1, 1)] / det,
            -cov2d[(0, 1)] / det,
            -cov2d[(1, 0)] / det,
            cov2d[(0, 0)] / det,
        );

        let viewdir = (mean - c_t).normalize();
        let raw = eval_sh_raw(&sh, &viewdir, set.sh_degree);
        let color = raw.map(|v| v.clamp(0.0, 1.0));
        flats.push(FlatSplat { z, mean2d, inv_cov, alpha, color });
    }
    // Depth order, input index breaking exact ties. `flats` preserves input
    // order, so a stable sort on z alone is that order.
    flats.sort_by(|a, b| a.z.total_cmp(&b.z));

    let (w, h) = (kf.width as usize, kf.height as usize);
    let mut out = RenderOutput::zeros(kf.width, kf.height);
    for py in 0..h {
        for px in 0..w {
            let pc = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
            let mut trans = 1.0f64;
            let mut rgb = Vector3::zeros();
            let mut depth_num = 0.0f64;
            for f in &flats {
                let d = pc - f.mean2d;
                let q1 = f.inv_cov[(0, 0)] * d[0] + f.inv_cov[(0, 1)] * d[1];
                let q2 = f.inv_cov[(1, 0)] * d[0] + f.inv_cov[(1, 1)] * d[1];
                let a = (f.alpha * (-0.5 * (d[0] * q1 + d[1] * q2)).exp()).min(o.alpha_max);
                if a < o.alpha_min {
                    continue;
                }
                rgb += f.color * (a * trans);
                depth_num += f.z * (a * trans);
                trans *= 1.0 - a;
            }
            let i = py * w + px;
            let a_px = 1.0 - trans;
            out.rgb[i * 3] = sf(rgb[0]);
            out.rgb[i * 3 + 1] = sf(rgb[1]);
            out.rgb[i * 3 + 2] = sf(rgb[2]);
            out.alpha[i] = sf(a_px);
            out.depth[i] = sf(if a_px > 0.0 { depth_num / a_px } else { 0.0 });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::{logit, render, softplus_inv, PixelGaussian};
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &RenderOutput<f64>, b: &RenderOutput<f64>) -> f64 {
        let d1 = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs());
        let d2 = a.alpha.iter().zip(&b.alpha).map(|(x, y)| (x - y).abs());
        let d3 = a.depth.iter().zip(&b.depth).map(|(x, y)| (x - y).abs());
        d1.chain(d2).chain(d3).fold(0.0, f64::max)
    }

    fn random_scene(
        seed: u64,
        n: usize,
        width: u32,
        height: u32,
    ) -> (GaussianSet<f64>, Vec<CameraPose<f64>>, CameraPose<f64>, CameraIntrinsics<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..n)
            .map(|_| PixelGaussian {
                // A few end up behind the target camera or nearly
                // transparent; both paths must agree on the culling.
                d: softplus_inv(rng.random_range(0.3..3.0)),
                q: Vector4::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ) + Vector4::new(1.5, 0.0, 0.0, 0.0),
                sh: (0..3).map(|_| rng.random_range(-0.2..1.4)).collect(),
                scale: Vector3::new(
                    rng.random_range(-3.0..0.5),
                    rng.random_range(-3.0..0.5),
                    rng.random_range(-3.0..0.5),
                ),
                opacity: logit(rng.random_range(0.002..0.95)),
                source_view: rng.random_range(0..2),
                source_pixel: rng.random_range(0..width * height),
            })
            .collect();
        let set = GaussianSet::new(gaussians, 0, 2, width, height).unwrap();
        let sources = vec![
            CameraPose::identity(),
            CameraPose::new(
                Vector4::new(1.0, rng.random_range(-0.05..0.05), 0.02, -0.03),
                Vector3::new(0.15, -0.05, 0.1),
            )
            .unwrap(),
        ];
        let target = CameraPose::new(
            Vector4::new(1.0, 0.04, rng.random_range(-0.05..0.05), 0.02),
            Vector3::new(-0.1, 0.08, rng.random_range(-0.2..0.2)),
        )
        .unwrap();
        let f = rng.random_range(0.9..1.4) * width as f64;
        let k = CameraIntrinsics::new(
            f,
            f * 1.05,
            width as f64 * 0.5,
            height as f64 * 0.52,
            width,
            height,
        )
        .unwrap();
        (set, sources, target, k)
    }

    #[test]
    fn empty_scene_is_black() {
        let set = GaussianSet::<f64>::new(Vec::new(), 0, 1, 8, 8).unwrap();
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let out =
            render_bruteforce(&set, &[CameraPose::identity()], &k, &CameraPose::identity(), &RenderOptions::default())
                .unwrap();
        assert!(out.rgb.iter().all(|&v| v == 0.0));
        assert!(out.alpha.iter().all(|&v| v == 0.0));
        assert!(out.depth.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn randomized_sweep_matches_tiled_renderer() {
        let opts = RenderOptions::default();
        let mut worst = 0.0f64;
        for seed in 0..50 {
            let (set, sources, target, k) = random_scene(seed, 8, 16, 16);
            let (fast, _) = render(&set, &sources, &k, &target, &opts).unwrap();
            let slow = render_bruteforce(&set, &sources, &k, &target, &opts).unwrap();
            worst = worst.max(max_abs_diff(&fast, &slow));
        }
        assert!(worst < 1e-5, "worst tiled/bruteforce deviation {worst}");
    }

    #[test]
    fn multi_tile_image_matches() {
        // 48×48 spans a 3×3 tile grid; wide Gaussians straddle tile borders.
        let opts = RenderOptions::default();
        for seed in [100, 101, 102] {
            let (set, sources, target, k) = random_scene(seed, 24, 48, 48);
            let (fast, _) = render(&set, &sources, &k, &target, &opts).unwrap();
            let slow = render_bruteforce(&set, &sources, &k, &target, &opts).unwrap();
            let d = max_abs_diff(&fast, &slow);
            assert!(d < 1e-5, "seed {seed}: deviation {d}");
        }
    }

    #[test]
    fn agrees_on_fully_covered_single_tile() {
        // Every Gaussian influences every pixel: tiling is a no-op and the
        // two paths differ only by floating-point association.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gaussians = (0..6)
            .map(|_| PixelGaussian {
                d: softplus_inv(rng.random_range(1.5..2.5)),
                q: Vector4::new(1.0, 0.1, -0.1, 0.05),
                sh: vec![0.8, 0.4, 0.2],
                scale: Vector3::new(0.5, 0.4, 0.3),
                opacity: logit(0.7),
                source_view: 0,
                source_pixel: rng.random_range(0..64),
            })
            .collect();
        let set = GaussianSet::new(gaussians, 0, 1, 8, 8).unwrap();
        let sources = vec![CameraPose::identity()];
        let target = CameraPose::new(Vector4::new(1.0, 0.0, 0.02, 0.0), Vector3::new(0.05, 0.0, 0.0)).unwrap();
        let k = CameraIntrinsics::new(9.0, 9.0, 4.0, 4.0, 8, 8).unwrap();
        let opts = RenderOptions::default();
        let (fast, _) = render(&set, &sources, &k, &target, &opts).unwrap();
        let slow = render_bruteforce(&set, &sources, &k, &target, &opts).unwrap();
        assert!(max_abs_diff(&fast, &slow) < 1e-9);
    }
}
