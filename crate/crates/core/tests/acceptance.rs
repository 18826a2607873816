//! Acceptance run: one PASS/FAIL line per criterion, with its wall time
//! against the budget. Exits non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use i2preg::attention::{masked_cross_attention, random_features, AttentionParams};
use i2preg::cloud::{farthest_point_sampling, group_points, hierarchical_decompose};
use i2preg::finematch::{Correspondence, CorrespondenceSet};
use i2preg::geom::{project_point, random_rotation, CameraIntrinsics, Pixel, RigidTransform};
use i2preg::linalg::{Matrix, Vec3};
use i2preg::metrics::{
    feature_matching_recall, inlier_ratio, registration_recall, rre, rte, MetricsReport, PairRecord, Thresholds,
};
use i2preg::pipeline::{coarse_ground_truth, generate_scene, run_pipeline, PipelineConfig};
use i2preg::pose::{epnp, ransac_pnp_pairs};
use i2preg::sampling::{build_batch, proxy_rng, select_matched_proxies};
use i2preg::supervision::{coarse_loss, coarse_loss_and_gradient, fine_loss, fine_weight_matrix};
use i2preg::transport::{add_slack, marginal_targets, sinkhorn, ScoreMatrix};

use common::*;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Camera-frame point behind a uniformly drawn pixel of `k`'s image.
fn camera_frame_point(k: &CameraIntrinsics<f64>, rng: &mut ChaCha8Rng) -> Vec3<f64> {
    let z = rng.random_range(0.5..50.0);
    let u = rng.random_range(0.0..k.width as f64);
    let v = rng.random_range(0.0..k.height as f64);
    Vec3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
}

fn random_intrinsics(rng: &mut ChaCha8Rng, width: usize, height: usize, max_focal: f64) -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(
        rng.random_range(20.0..max_focal),
        rng.random_range(20.0..max_focal),
        rng.random_range(0.0..width as f64),
        rng.random_range(0.0..height as f64),
        width,
        height,
    )
    .unwrap()
}

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform<f64> {
    let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    RigidTransform::new(random_rotation(rng), t).unwrap()
}

/// Projection into the 128×40 matching grid against the 3×4 matrix oracle,
/// both in plain f64 and in double-double arithmetic.
fn projection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_exact) = (0.0f64, 0.0f64);
    let mut behind = 0;
    for _ in 0..100_000 {
        let k = random_intrinsics(&mut rng, 128, 40, 200.0);
        let t = random_transform(&mut rng);
        let mut pc = camera_frame_point(&k, &mut rng);
        if rng.random_bool(0.1) {
            pc.z = -pc.z;
        }
        let p = t.inverse().apply(pc);
        let z_min = i2preg::geom::DEFAULT_Z_MIN;
        let got = project_point(&k, &t, p).ok();
        match (got, project_homogeneous(&k, &t, p, z_min), project_homogeneous_exact(&k, &t, p, z_min)) {
            (Some(g), Some((u, v)), Some((ue, ve))) => {
                worst = worst.max((g.u - u).abs()).max((g.v - v).abs());
                worst_exact = worst_exact.max((g.u - ue).abs()).max((g.v - ve).abs());
            }
            (None, None, None) => behind += 1,
            _ => return Err(format!("front/behind disagreement at {p:?}")),
        }
    }
    check(worst <= 1e-12 && worst_exact <= 1e-12, || {
        format!("max pixel difference {worst:e}, {worst_exact:e} against the exact oracle")
    })?;
    Ok(format!("max diff {worst:.1e} px, {worst_exact:.1e} px exact, {behind} behind the camera"))
}

fn fps_and_grouping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut total = 0;
    for c in 0..100 {
        let n = rng.random_range(1..=2048);
        // Every fourth cloud sits on a coarse lattice to force distance ties.
        let lattice = c % 4 == 0;
        let points: Vec<Vec3<f64>> = (0..n)
            .map(|_| {
                let mut q = || {
                    let x: f64 = rng.random_range(-10.0..10.0);
                    if lattice {
                        x.round()
                    } else {
                        x
                    }
                };
                Vec3::new(q(), q(), q())
            })
            .collect();
        let count = rng.random_range(1..=n.min(48));
        let start = rng.random_range(0..n);
        let centers = farthest_point_sampling(&points, count, start).map_err(|e| e.to_string())?;
        check(centers == fps_oracle(&points, count, start), || format!("FPS differs on cloud {c}"))?;
        let groups = group_points(&points, &centers).map_err(|e| e.to_string())?;
        check(groups.assignment() == group_oracle(&points, &centers).as_slice(), || {
            format!("grouping differs on cloud {c}")
        })?;
        total += n;
    }
    Ok(format!("100 clouds, {total} points"))
}

fn sinkhorn_marginals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_margin, mut worst_direct) = (0.0f64, 0.0f64);
    for t in 0..100 {
        let rows = rng.random_range(1..=128);
        let cols = rng.random_range(1..=512);
        let slack = rng.random_range(-1.0..2.0);
        let raw = ScoreMatrix::new(gaussian(rows, cols, 1000 + t));
        let z = add_slack(&raw, slack).map_err(|e| e.to_string())?;
        let plan = sinkhorn(&z, 100).map_err(|e| e.to_string())?;
        for i in 0..rows {
            worst_margin = worst_margin.max((plan.values.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        for j in 0..cols {
            worst_margin = worst_margin.max((plan.values.column(j).iter().sum::<f64>() - 1.0).abs());
        }
        let (a, b) = marginal_targets::<f64>(rows + 1, cols + 1, true);
        let direct = sinkhorn_direct(&z.values, &a, &b, 100);
        if direct.is_finite() {
            worst_direct = worst_direct.max(direct.max_abs_diff(&plan.values));
        }
    }
    check(worst_margin <= 1e-9, || format!("marginal error {worst_margin:e}"))?;
    check(worst_direct <= 1e-9, || format!("log/direct difference {worst_direct:e}"))?;
    Ok(format!("marginal error {worst_margin:.1e}, log vs direct {worst_direct:.1e}"))
}

fn supervision_oracles() -> Outcome {
    let base = PipelineConfig::desk();
    let (mut worst_ratio, mut worst_loss) = (0.0f64, 0.0f64);
    let mut binary = 0usize;
    for s in 0..50u64 {
        let config = PipelineConfig { seed: s, ..base.clone() };
        let scene = generate_scene::<f64, _>(&config, &mut ChaCha8Rng::seed_from_u64(s)).map_err(|e| e.to_string())?;
        let points = scene.cloud.points();
        let k = scene.grid_intrinsics();
        let decomp = hierarchical_decompose(points, config.level_counts, 0).map_err(|e| e.to_string())?.composed();
        let w = coarse_ground_truth(&scene, &decomp).map_err(|e| e.to_string())?;
        let oracle = coarse_weights_oracle(&k, &scene.gt_pose, points, &decomp, &scene.layout);
        worst_ratio = worst_ratio.max(w.values.max_abs_diff(&oracle));

        let driver = w.interior();
        let mut batches = Vec::new();
        for j in select_matched_proxies(&driver) {
            let batch = build_batch(&driver, &decomp, j, 65, 3, &scene.layout, &mut proxy_rng(s, j))
                .map_err(|e| e.to_string())?;
            let fw = fine_weight_matrix(&batch, &k, &scene.gt_pose, points, 1.0).map_err(|e| e.to_string())?;
            let fo = fine_weights_oracle(&batch, &k, &scene.gt_pose, points, 1.0);
            let same = fw.values.as_slice().iter().zip(fo.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
            check(same, || format!("fine weights differ, scene {s} proxy {j}"))?;
            binary += fw.values.as_slice().iter().filter(|&&x| x == 1.0).count();
            batches.push(fw);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
        let scores = ScoreMatrix::new(random_features(driver.values.rows(), driver.values.cols(), &mut rng));
        let plan = sinkhorn(&add_slack(&scores, 1.0).unwrap(), 100).map_err(|e| e.to_string())?;
        let got = coarse_loss(&plan, &w).map_err(|e| e.to_string())?;
        let want = nll_loop(&plan.values, &w.values).ok_or("coarse oracle undefined")?;
        worst_loss = worst_loss.max((got - want).abs());

        let fine_plans: Vec<ScoreMatrix<f64>> = batches
            .iter()
            .map(|fw| {
                let (r, c) = (fw.values.rows(), fw.values.cols());
                let values = Matrix::from_fn(r, c, |_, _| rng.random_range(1e-6..1.0));
                ScoreMatrix { values, has_slack: true }
            })
            .collect();
        let got = fine_loss(&fine_plans, &batches).map_err(|e| e.to_string())?;
        let mut want = 0.0;
        for (p, fw) in fine_plans.iter().zip(&batches) {
            if fw.values.as_slice().iter().any(|&x| x != 0.0) {
                want += nll_loop(&p.values, &fw.values).ok_or("fine oracle undefined")?;
            }
        }
        worst_loss = worst_loss.max((got - want).abs());
    }
    check(worst_ratio <= 1e-12, || format!("coarse weight difference {worst_ratio:e}"))?;
    check(worst_loss <= 1e-12, || format!("loss difference {worst_loss:e}"))?;
    Ok(format!(
        "ratio diff {worst_ratio:.1e}, {binary} positive fine weights bitwise equal, loss diff {worst_loss:.1e}"
    ))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let scores = ScoreMatrix::new(random_features::<f64, _>(8, 8, &mut rng));
        let z = add_slack(&scores, 0.5).unwrap();
        let raw = random_features::<f64, _>(8, 8, &mut rng).map(|x| if x > 0.3 { x } else { 0.0 });
        let col: Vec<f64> = (0..8).map(|j| raw.column(j).iter().sum::<f64>() * 1.5 + 1e-12).collect();
        let row: Vec<f64> = (0..8).map(|i| raw.row(i).iter().sum::<f64>() * 1.5 + 1e-12).collect();
        let r_left = Matrix::from_fn(8, 8, |i, j| raw[(i, j)] / col[j]);
        let r_right = Matrix::from_fn(8, 8, |i, j| raw[(i, j)] / row[i]);
        let w = i2preg::supervision::coarse_weight_matrix(&r_left, &r_right).unwrap();
        let (_, grad) = coarse_loss_and_gradient(&z, &w, 100).map_err(|e| e.to_string())?;
        let f = |x: &[f64]| {
            let m = Matrix::new(9, 9, x.to_vec()).unwrap();
            coarse_loss(&sinkhorn(&ScoreMatrix { values: m, has_slack: true }, 100).unwrap(), &w).unwrap()
        };
        let fd = i2preg::attention::finite_difference_gradient(f, z.values.as_slice(), 1e-6).map_err(|e| e.to_string())?;
        let diff = fd.iter().zip(grad.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    check(worst < 1e-4, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

fn masked_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut probes = 0;
    for t in 0..100 {
        let d = 4 * rng.random_range(1..=8);
        let (m, n) = (rng.random_range(2..40), rng.random_range(2..40));
        let params = AttentionParams::random(d, &mut rng);
        let pix = random_features::<f64, _>(m, d, &mut rng);
        let pts = random_features::<f64, _>(n, d, &mut rng);
        let mut pm: Vec<bool> = (0..m).map(|_| rng.random_bool(0.6)).collect();
        let mut qm: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        pm[0] = false;
        qm[0] = false;
        let out = masked_cross_attention(&params, &pix, &pts, &pm, &qm).map_err(|e| e.to_string())?;
        for j in (0..n).filter(|&j| !qm[j]) {
            let mut p2 = pts.clone();
            p2.row_mut(j).iter_mut().for_each(|v| *v += rng.random_range(-50.0..50.0));
            let o2 = masked_cross_attention(&params, &pix, &p2, &pm, &qm).unwrap();
            check(o2 == out, || format!("instance {t}: masked point {j} leaks"))?;
            probes += 1;
        }
        for i in (0..m).filter(|&i| !pm[i]) {
            let mut x2 = pix.clone();
            x2.row_mut(i).iter_mut().for_each(|v| *v += rng.random_range(-50.0..50.0));
            let o2 = masked_cross_attention(&params, &x2, &pts, &pm, &qm).unwrap();
            for r in (0..m).filter(|&r| r != i) {
                check(o2.row(r) == out.row(r), || format!("instance {t}: masked pixel {i} leaks into row {r}"))?;
            }
            probes += 1;
        }
    }
    Ok(format!("{probes} perturbations, every other output row bitwise unchanged"))
}

fn pnp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = CameraIntrinsics::new(300.0, 300.0, 320.0, 240.0, 640, 480).unwrap();
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let t = random_transform(&mut rng);
        let n = rng.random_range(6..=40);
        let cam: Vec<Vec3<f64>> = (0..n)
            .map(|_| {
                let z = rng.random_range(2.0..20.0);
                Vec3::new(rng.random_range(-0.8..0.8) * z, rng.random_range(-0.6..0.6) * z, z)
            })
            .collect();
        let world: Vec<Vec3<f64>> = cam.iter().map(|&p| t.inverse().apply(p)).collect();
        let px: Vec<Pixel<f64>> = world.iter().map(|&p| project_point(&k, &t, p).unwrap()).collect();
        let est = epnp(&world, &px, &k).map_err(|e| e.to_string())?;
        worst_r = worst_r.max(rre(est.rotation(), t.rotation()));
        worst_t = worst_t.max(rte(est.translation(), t.translation()));
    }
    check(worst_r < 1e-6 && worst_t < 1e-8, || format!("EPnP RRE {worst_r:e} RTE {worst_t:e}"))?;

    let mut good = 0;
    for trial in 0..20u64 {
        let t = random_transform(&mut rng);
        let mut world = Vec::new();
        let mut px = Vec::new();
        for i in 0..100 {
            let z = rng.random_range(2.0..20.0);
            let pc = Vec3::new(rng.random_range(-0.8..0.8) * z, rng.random_range(-0.6..0.6) * z, z);
            let p = t.inverse().apply(pc);
            world.push(p);
            px.push(if i % 2 == 0 {
                project_point(&k, &t, p).unwrap()
            } else {
                Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
            });
        }
        if let Ok(e) = ransac_pnp_pairs(&world, &px, &k, 500, 1.0, trial) {
            if rre(e.transform.rotation(), t.rotation()) < 0.1 {
                good += 1;
            }
        }
    }
    check(good >= 19, || format!("RANSAC recovered {good}/20"))?;
    Ok(format!("EPnP RRE {worst_r:.1e} deg, RTE {worst_t:.1e} m; RANSAC {good}/20"))
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = CameraIntrinsics::new(64.0, 64.0, 64.0, 20.0, 128, 40).unwrap();
    let th = Thresholds::default();
    for trial in 0..200 {
        let gt = random_transform(&mut rng);
        let n = rng.random_range(0..60);
        let entries: Vec<Correspondence<f64>> = (0..n)
            .map(|_| {
                let z = rng.random_range(1.0..20.0);
                let pc = Vec3::new(rng.random_range(-1.0..1.0) * z, rng.random_range(-0.3..0.3) * z, z);
                let p = gt.inverse().apply(if rng.random_bool(0.1) { -pc } else { pc });
                let q = project_point(&k, &gt, p).unwrap_or(Pixel::new(0.0, 0.0));
                let off = if rng.random_bool(0.5) { 0.5 } else { 3.0 };
                Correspondence {
                    pixel: Pixel::new(q.u + rng.random_range(-off..off), q.v + rng.random_range(-off..off)),
                    point: p,
                    confidence: 1.0,
                    proxy_index: 0,
                }
            })
            .collect();
        let c = CorrespondenceSet { entries };
        let ir = inlier_ratio(&c, &k, &gt, th.tau_d);
        check(ir == inlier_ratio_loop(&c, &k, &gt, th.tau_d), || format!("IR differs on trial {trial}"))?;
    }
    let irs: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..0.3)).collect();
    let fmr_loop = irs.iter().filter(|&&x| x > th.tau_m).count() as f64 / irs.len() as f64;
    check(feature_matching_recall(&irs, th.tau_m).unwrap() == fmr_loop, || "FMR differs".into())?;
    let errs: Vec<(f64, f64)> =
        (0..300).map(|_| (rng.random_range(0.0..20.0), rng.random_range(0.0..10.0))).collect();
    let rr_at = |r: f64, t: f64| registration_recall(&errs, r, t).unwrap();
    let rr_loop = errs.iter().filter(|(r, t)| *r < th.tau_r && *t < th.tau_t).count() as f64 / errs.len() as f64;
    check(rr_at(th.tau_r, th.tau_t) == rr_loop, || "RR differs".into())?;
    let pairs: Vec<PairRecord> = errs
        .iter()
        .zip(&irs)
        .map(|(&(r, t), &ir)| PairRecord {
            ir,
            irr: ir,
            num_correspondences: 1,
            num_retained: 1,
            rre: Some(r),
            rte: Some(t),
            success: r < th.tau_r && t < th.tau_t,
        })
        .collect();
    let report = MetricsReport::from_pairs(pairs, th).unwrap();
    check(report.rr == rr_loop && report.fmr == fmr_loop, || "report differs from loops".into())?;

    let id = RigidTransform::<f64>::identity();
    check(rre(id.rotation(), id.rotation()) == 0.0, || "RRE(I, I) != 0".into())?;
    check(rte(Vec3::new(1.0, 2.0, 2.0), Vec3::zeros()) == 3.0, || "RTE((1,2,2), 0) != 3".into())?;
    let grid = |max: f64| (1..=10).map(move |i| max * i as f64 / 10.0);
    for r in grid(20.0) {
        let mut prev = -1.0;
        for t in grid(10.0) {
            let v = rr_at(r, t);
            check(v >= prev && v >= rr_at(r - 2.0, t), || format!("RR not monotone at ({r}, {t})"))?;
            prev = v;
        }
    }
    Ok("IR, FMR and RR equal their loops; RR monotone on 10x10".into())
}

fn end_to_end() -> Outcome {
    let mut lines = Vec::new();
    let (mut min_ir, mut max_r, mut max_t, mut registered) = (1.0f64, 0.0f64, 0.0f64, 0);
    for s in 0..20u64 {
        let config = PipelineConfig { seed: s, ..PipelineConfig::desk() };
        let scene = generate_scene::<f64, _>(&config, &mut ChaCha8Rng::seed_from_u64(s)).map_err(|e| e.to_string())?;
        let out = run_pipeline(&scene, &config).map_err(|e| e.to_string())?;
        let rec = out.record;
        min_ir = min_ir.min(rec.ir);
        if rec.success {
            registered += 1;
        }
        let (r, t) = (rec.rre.unwrap_or(f64::INFINITY), rec.rte.unwrap_or(f64::INFINITY));
        max_r = max_r.max(r);
        max_t = max_t.max(t);
        lines.push(format!("scene {s}: IR {:.4} RRE {r:.2e} RTE {t:.2e} pairs {}", rec.ir, rec.num_correspondences));
    }
    let ok = min_ir >= 0.99 && registered == 20 && max_r < 0.5 && max_t < 0.05;
    check(ok, || lines.join("; "))?;
    Ok(format!("min IR {min_ir:.4}, RR {registered}/20, max RRE {max_r:.1e} deg, max RTE {max_t:.1e} m"))
}

fn full_shapes() -> Outcome {
    let config = PipelineConfig::full();
    let scene = generate_scene::<f64, _>(&config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    let s = run_pipeline(&scene, &config).map_err(|e| e.to_string())?.shapes;
    let want = [
        ("points", s.points, 40960),
        ("first level", s.first_level, 1280),
        ("point proxies", s.point_proxies, 256),
        ("grid height", s.grid_height, 40),
        ("grid width", s.grid_width, 128),
        ("pixel proxies", s.pixel_proxies, 80),
        ("batch pixels", s.batch_pixels, 192),
        ("batch points", s.batch_points, 65),
        ("feature dim", s.feature_dim, 64),
    ];
    for (name, got, expected) in want {
        check(got == expected, || format!("{name}: {got} != {expected}"))?;
    }
    Ok(format!("80 pixel proxies, 256 point proxies, m=192, n=65, {} matched", s.matched_proxies))
}

fn main() {
    let criteria: [(&str, Option<u64>, fn() -> Outcome); 10] = [
        ("projection matches the homogeneous oracle", Some(1), projection_oracle),
        ("FPS and grouping match brute force", Some(5), fps_and_grouping),
        ("Sinkhorn marginals and log/direct agreement", Some(10), sinkhorn_marginals),
        ("supervision weights and losses match loop oracles", Some(20), supervision_oracles),
        ("coarse loss gradient matches finite differences", Some(10), gradient_check),
        ("masked rows never reach the attention output", None, masked_attention),
        ("EPnP exact recovery and RANSAC under outliers", Some(30), pnp),
        ("metrics match loop oracles", None, metrics),
        ("oracle-feature end-to-end runs", Some(300), end_to_end),
        ("stage shapes at full size", Some(120), full_shapes),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let late = budget.is_some_and(|b| elapsed > Duration::from_secs(b));
        let limit = budget.map_or(String::new(), |b| format!(" / {b} s"));
        let (status, detail) = match (&outcome, late) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("over time budget; {d}")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {:>2} {status}: {name} [{:.2} s{limit}] {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
