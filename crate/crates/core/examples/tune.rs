// Scratch flagship tuner, not part of the repo. Deleted before commit.
use std::time::Instant;

use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use splatcal::evalmetrics::{rpa, PoseSet};
use splatcal::geometry::CameraPose;
use splatcal::photometric::{psnr, Image};
use splatcal::scalar::{sf, Scalar};
use splatcal::selfcal::{init_gaussians, split_ref_tgt, FitConfig, FitState};
use splatcal::splat::{render, RenderOptions};
use splatcal::synthscene::{gen_scene, render_dataset, SceneConfig, SceneSequence};

type S = f32;

fn unit(rng: &mut StdRng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn perturb(pose: &CameraPose<f64>, rot_deg: f64, trans_frac: f64, rng: &mut StdRng) -> CameraPose<f64> {
    let axis = unit(rng) * rot_deg.to_radians();
    let mut p = pose.retract(&[0.0, 0.0, 0.0, axis.x, axis.y, axis.z]);
    let dir = unit(rng);
    p.trans += dir * (trans_frac * pose.trans.norm());
    p
}

fn eval(state: &FitState<S>, seq: &SceneSequence, targets_gt: &[usize]) -> (f64, f64, f64) {
    let gt = seq.gt.as_ref().unwrap();
    let frames = state.frames.clone();
    let pred: Vec<CameraPose<f64>> = state.poses.iter().map(|p| p.cast::<f64>()).collect();
    let gt_poses: Vec<CameraPose<f64>> = frames.iter().map(|&f| gt.poses[f]).collect();
    let pr = PoseSet::new(frames.clone(), pred).unwrap();
    let gs = PoseSet::new(frames, gt_poses).unwrap();
    let rep = rpa(&pr, &gs, &[5.0, 15.0]).unwrap();
    let mut rot: Vec<f64> = rep.pairs.iter().map(|p| p.rot_deg).collect();
    let mut tr: Vec<f64> = rep.pairs.iter().map(|p| p.trans_deg).collect();
    rot.sort_by(|a, b| a.partial_cmp(b).unwrap());
    tr.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = rot.len() / 2;
    println!(
        "    rot: med={:.2} max={:.2} | trans: med={:.2} max={:.2}",
        rot[mid],
        rot.last().unwrap(),
        tr[mid],
        tr.last().unwrap()
    );
    let refs: Vec<usize> = state.ref_pos.iter().map(|&p| state.frames[p]).collect();
    let med = |mut v: Vec<f64>| -> f64 {
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let class = |want_i: bool, want_j: bool| -> (f64, f64) {
        let r: Vec<f64> = rep
            .pairs
            .iter()
            .filter(|p| refs.contains(&p.i) == want_i && refs.contains(&p.j) == want_j
                || refs.contains(&p.i) == want_j && refs.contains(&p.j) == want_i)
            .map(|p| p.rot_deg.max(p.trans_deg))
            .collect();
        let m = r.iter().cloned().fold(f64::MIN, f64::max);
        (med(r), m)
    };
    let (rr_med, rr_max) = class(true, true);
    let (rt_med, rt_max) = class(true, false);
    let (tt_med, tt_max) = class(false, false);
    println!(
        "    worst-axis med/max: ref-ref {rr_med:.2}/{rr_max:.2} ref-tgt {rt_med:.2}/{rt_max:.2} tgt-tgt {tt_med:.2}/{tt_max:.2}"
    );
    let mut per_view: Vec<(usize, f64)> = Vec::new();
    for v in state.frames.iter().cloned() {
        let errs: Vec<f64> = rep
            .pairs
            .iter()
            .filter(|p| p.i == v || p.j == v)
            .map(|p| p.rot_deg.max(p.trans_deg))
            .collect();
        per_view.push((v, med(errs)));
    }
    let s: Vec<String> = per_view
        .iter()
        .map(|(v, e)| {
            let tag = if refs.contains(v) { "r" } else { "t" };
            format!("{v}{tag}:{e:.1}")
        })
        .collect();
    println!("    per-view worst-axis med: {}", s.join(" "));

    let srcs: Vec<CameraPose<S>> = state.ref_pos.iter().map(|&p| state.poses[p]).collect();
    let opts = RenderOptions::default();
    let mut mean = 0.0;
    for &tp in &state.tgt_pos {
        let (out, _) = render(&state.set, &srcs, &state.intrinsics, &state.poses[tp], &opts).unwrap();
        let pred_img = Image::new(out.width, out.height, out.rgb).unwrap();
        let data: Vec<S> = seq.frame(state.frames[tp]).iter().map(|&v| sf(v as f64)).collect();
        let tgt = Image::new(seq.width, seq.height, data).unwrap();
        mean += psnr(&pred_img, &tgt).unwrap().to_f64();
    }
    let _ = targets_gt;
    (rep.at(5.0).unwrap(), rep.at(15.0).unwrap(), mean / state.tgt_pos.len() as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps_list: Vec<usize> = args
        .get(1)
        .map(|s| s.split(',').map(|r| r.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![300]);
    let steps = steps_list[0];
    let lr_g: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let lr_e: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let lr_i: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let init_depth: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2.5);
    let lambda: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let clip: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let skip: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(5.0);
    let stages: Vec<u32> = args
        .get(9)
        .map(|s| s.split(',').map(|r| r.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![64]);
    let windows_list: Vec<usize> = args
        .get(10)
        .map(|s| s.split(',').map(|r| r.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1]);
    let windows = windows_list[0];
    let warm: bool = args.get(11).map(|s| s != "0").unwrap_or(true);

    let base_cfg = SceneConfig {
        preset: "box".into(),
        n_views: 10,
        width: 64,
        height: 64,
        orbit_deg: 60.0,
        seed: 0,
    };
    let gt_poses = {
        let dir = tempfile::tempdir().unwrap();
        let seq = render_dataset(&gen_scene(&base_cfg).unwrap(), dir.path()).unwrap();
        seq.gt.as_ref().unwrap().poses.clone()
    };

    let mut rng = StdRng::seed_from_u64(42);
    let noisy: Vec<CameraPose<f64>> =
        gt_poses.iter().map(|p| perturb(p, 5.0, 0.10, &mut rng)).collect();

    // Initial RPA of the noise itself.
    {
        let frames: Vec<usize> = (0..10).collect();
        let pr = PoseSet::new(frames.clone(), noisy.clone()).unwrap();
        let gs = PoseSet::new(frames, gt_poses.clone()).unwrap();
        let rep = rpa(&pr, &gs, &[5.0, 15.0]).unwrap();
        println!(
            "init noise: rpa5={:.2} rpa15={:.2}",
            rep.at(5.0).unwrap(),
            rep.at(15.0).unwrap()
        );
    }

    let started = Instant::now();

    if windows > 1 {
        use splatcal::selfcal::fit;
        let mut poses_cur = noisy.clone();
        for (si, &res) in stages.iter().enumerate() {
            let dir = tempfile::tempdir().unwrap();
            let scene_cfg = SceneConfig { width: res, height: res, ..base_cfg.clone() };
            let seq = render_dataset(&gen_scene(&scene_cfg).unwrap(), dir.path()).unwrap();
            let windows = *windows_list.get(si).unwrap_or(windows_list.last().unwrap());
            let steps = *steps_list.get(si).unwrap_or(steps_list.last().unwrap());
            let cfg = FitConfig {
                views: 10,
                k_ref: 5,
                lambda,
                windows,
                steps_per_window: steps,
                lr_gaussians: lr_g,
                lr_extrinsics: lr_e,
                lr_intrinsics: lr_i,
                init_depth: if si == 0 { init_depth } else { 1.0 },
                clip_norm: clip,
                skip_norm: skip,
                warm_start: warm,
                width: res,
                height: res,
                seed: 0,
                ..FitConfig::default()
            };
            let init: Vec<(usize, CameraPose<S>)> =
                poses_cur.iter().enumerate().map(|(f, p)| (f, p.cast::<S>())).collect();
            let r = fit::<S>(&seq, None, &cfg, Some(&init)).unwrap();
            let state = r.state;
            let skips = r.diagnostics.iter().filter(|d| d.skipped).count();
            let (r5, r15, db) = eval(&state, &seq, &[]);
            println!(
                "res {res} fit {windows}x{steps}: loss={:.5} rpa5={r5:.2} rpa15={r15:.2} psnr={db:.2} skips={skips} fx={:.2} ({:.1}s)",
                r.loss_history.last().unwrap(),
                state.intrinsics.fx.to_f64(),
                started.elapsed().as_secs_f64()
            );
            poses_cur = {
                let mut by_frame = vec![CameraPose::<f64>::identity(); 10];
                for (f, p) in &r.poses_by_frame {
                    by_frame[*f] = p.cast::<f64>();
                }
                by_frame
            };
        }
        return;
    }

    let mut poses_cur = noisy.clone();
    for (si, &res) in stages.iter().enumerate() {
        let dir = tempfile::tempdir().unwrap();
        let scene_cfg = SceneConfig { width: res, height: res, ..base_cfg.clone() };
        let seq = render_dataset(&gen_scene(&scene_cfg).unwrap(), dir.path()).unwrap();

        let cfg = FitConfig {
            views: 10,
            k_ref: 5,
            lambda,
            windows: 1,
            steps_per_window: steps,
            lr_gaussians: lr_g,
            lr_extrinsics: lr_e,
            lr_intrinsics: lr_i,
            init_depth: if si == 0 { init_depth } else { 1.0 },
            clip_norm: clip,
            skip_norm: skip,
            seed: 0,
            ..FitConfig::default()
        };

        let window: Vec<usize> = (0..10).collect();
        let mut split_rng = StdRng::seed_from_u64(cfg.seed);
        let (refs, _tgts) = split_ref_tgt(&window, cfg.k_ref, &mut split_rng).unwrap();
        let ref_pos: Vec<usize> =
            window.iter().enumerate().filter(|(_, f)| refs.contains(f)).map(|(p, _)| p).collect();
        let tgt_pos: Vec<usize> = (0..window.len()).filter(|p| !ref_pos.contains(p)).collect();
        if si == 0 {
            println!("refs {refs:?}");
        }

        let rf = res as f64;
        let k = splatcal::geometry::CameraIntrinsics::<S>::new(
            sf(rf),
            sf(rf),
            sf(rf * 0.5),
            sf(rf * 0.5),
            res,
            res,
        )
        .unwrap();
        let poses: Vec<CameraPose<S>> = poses_cur.iter().map(|p| p.cast::<S>()).collect();
        let ref_images: Vec<&[f32]> = refs.iter().map(|&f| seq.frame(f)).collect();
        let ref_poses: Vec<CameraPose<S>> = ref_pos.iter().map(|&p| poses[p]).collect();
        let set = init_gaussians(&ref_images, &k, &ref_poses, cfg.init_depth, 0).unwrap();
        let mut state = FitState::new(set, window.clone(), poses, ref_pos, tgt_pos, k).unwrap();

        let targets: Vec<Image<S>> = state
            .tgt_pos
            .iter()
            .map(|&p| {
                let data: Vec<S> =
                    seq.frame(window[p]).iter().map(|&v| sf(v as f64)).collect();
                Image::new(seq.width, seq.height, data).unwrap()
            })
            .collect();

        if si == 0 {
            let (r5, r15, db) = eval(&state, &seq, &[]);
            println!("step 0: rpa5={r5:.2} rpa15={r15:.2} psnr={db:.2}");
        }

        let mut skips = 0usize;
        for i in 0..steps {
            let (loss, action) = state.fit_step(&targets, &cfg).unwrap();
            if action.skipped() {
                skips += 1;
            }
            if (i + 1) % 50 == 0 || i + 1 == steps {
                let (r5, r15, db) = eval(&state, &seq, &[]);
                println!(
                    "res {res} step {}: loss={loss:.5} rpa5={r5:.2} rpa15={r15:.2} psnr={db:.2} skips={skips} fx={:.2} ({:.1}s)",
                    i + 1,
                    state.intrinsics.fx.to_f64(),
                    started.elapsed().as_secs_f64()
                );
            }
        }
        poses_cur = state.poses.iter().map(|p| p.cast::<f64>()).collect();
    }
}
