//! Oracle checks with fixed budgets, shared by `selftest` and the acceptance run.

use std::time::Instant;

use nalgebra::{Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use posebench::geometry::{
    allo_to_ego, axisangle_to_matrix, decode_site, ego_to_allo, encode_site, logquat_to_matrix, matrix_to_axisangle,
    matrix_to_logquat, matrix_to_quat, matrix_to_rot6d, quat_to_matrix, rot6d_to_matrix, sample_rotation, AxisAngle,
    Pose, Quaternion, RotationMatrix,
};
use posebench::gradient_suite::{loss_cases, op_cases};
use posebench::metrics::{add_error, add_recall, adds_error, auc_add, ndeg_ncm, relative_add};
use posebench::patch_pnp::{train, LossConfig, LossMode, NetConfig, PatchPnp, RotMode, TrainConfig, ZOOM_SIZE};
use posebench::pnp::{epnp_solve, maps_to_correspondences, ransac_pnp, CorrespondenceSet, RansacConfig};
use posebench::synth::{
    benchmark_camera, corrupt_maps, generate_dataset, pixel_location, sample_pose, sphere_bbox, sphere_model_points,
    DatasetSpec, NoiseSpec, SPHERE_EXTENTS,
};

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {} ({:.2} s)", self.name, self.detail, self.seconds)
    }
}

fn timed(name: &'static str, budget_s: f64, f: impl FnOnce() -> Result<(bool, String), String>) -> CheckOutcome {
    let start = Instant::now();
    let res = f();
    let seconds = start.elapsed().as_secs_f64();
    match res {
        Ok((ok, detail)) => {
            let in_time = seconds < budget_s;
            let detail = if in_time { detail } else { format!("{detail}; over the {budget_s} s budget") };
            CheckOutcome { name, passed: ok && in_time, detail, seconds }
        }
        Err(e) => CheckOutcome { name, passed: false, detail: e, seconds },
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// EPnP without RANSAC on 12 exact correspondences per pose.
pub fn epnp_exact(poses: usize, seed: u64) -> CheckOutcome {
    timed("epnp exact recovery", 5.0, || {
        let k = benchmark_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
        for _ in 0..poses {
            let pose = sample_pose(&mut rng);
            let pts: Vec<Vector3<f64>> = (0..12).map(|_| random_unit(&mut rng)).collect();
            let uv: Vec<Vector2<f64>> = pts.iter().map(|p| k.project(&pose.apply(p))).collect();
            let c = CorrespondenceSet::new(pts, uv).map_err(|e| e.to_string())?;
            let est = epnp_solve(&c, &k).map_err(|e| e.to_string())?;
            worst_r = worst_r.max(est.rot.angle_to(&pose.rot));
            worst_t = worst_t.max((est.t - pose.t).amax());
        }
        Ok((
            worst_r < 1e-6 && worst_t < 1e-6,
            format!("{poses} poses, max rotation error {worst_r:.2e} rad, max translation error {worst_t:.2e}"),
        ))
    })
}

/// RANSAC on rendered maps with 30% of the pixels replaced by gross outliers.
pub fn ransac_outliers(trials: usize, seed: u64) -> CheckOutcome {
    timed("ransac with 30% outliers", 30.0, || {
        let data = generate_dataset(&DatasetSpec::test(trials, seed)).map_err(|e| e.to_string())?;
        let model = sphere_model_points();
        let errs: Vec<f64> = data
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let spec = NoiseSpec { sigma: 0.0, outlier_ratio: 0.3, seed: seed ^ i as u64 };
                let maps = corrupt_maps(&s.maps, &spec).ok()?;
                let c = maps_to_correspondences(&maps, &s.k, &SPHERE_EXTENTS).ok()?;
                let cfg = RansacConfig { seed: i as u64, ..RansacConfig::default() };
                let out = ransac_pnp(&c, &s.k, &cfg).ok()?;
                Some(relative_add(&out.pose, &s.pose, &model, s.diameter))
            })
            .map(|e| e.unwrap_or(f64::INFINITY))
            .collect();
        let good = errs.iter().filter(|&&e| e < 1e-3).count();
        let frac = good as f64 / trials.max(1) as f64;
        let worst = errs.iter().copied().fold(0.0, f64::max);
        Ok((frac >= 0.99, format!("{good}/{trials} below 1e-3 relative ADD, worst {worst:.2e}")))
    })
}

/// Finite-difference checks of every op and every loss configuration.
pub fn gradients(probes: usize) -> CheckOutcome {
    timed("gradient checks", 120.0, || {
        let mut cases = op_cases(probes, 1e-4).map_err(|e| e.to_string())?;
        cases.extend(loss_cases(probes, 1e-4).map_err(|e| e.to_string())?);
        let failed: Vec<&str> = cases.iter().filter(|c| !c.report.passed()).map(|c| c.name.as_str()).collect();
        let worst = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
        let mut detail = format!("{} functions x {probes} probes, max relative error {worst:.2e}", cases.len());
        if !failed.is_empty() {
            detail.push_str(&format!("; failing: {}", failed.join(", ")));
        }
        Ok((failed.is_empty(), detail))
    })
}

fn mat_diff(a: &RotationMatrix<f64>, b: &RotationMatrix<f64>) -> f64 {
    (a.matrix() - b.matrix()).amax()
}

/// Every rotation parameterization, SITE and the allocentric conversion, forward and back.
pub fn round_trips(cases: usize, seed: u64) -> CheckOutcome {
    timed("round trips", f64::INFINITY, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = benchmark_camera();
        let mut worst = [0.0f64; 7];
        for _ in 0..cases {
            let r: RotationMatrix<f64> = sample_rotation(&mut rng);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).map_err(|e| e.to_string())?;
            worst[0] = worst[0].max(mat_diff(&r, &back));

            // q and -q are the same rotation.
            let q = random_unit4(&mut rng);
            let q2 = matrix_to_quat(&quat_to_matrix(&q).map_err(|e| e.to_string())?);
            let (a, b) = (Vector4::new(q.w, q.x, q.y, q.z), Vector4::new(q2.w, q2.x, q2.y, q2.z));
            worst[1] = worst[1].max((a - b).amax().min((a + b).amax()));
            let back = quat_to_matrix(&matrix_to_quat(&r)).map_err(|e| e.to_string())?;
            worst[1] = worst[1].max(mat_diff(&r, &back));

            worst[2] = worst[2].max(mat_diff(&r, &axisangle_to_matrix(&matrix_to_axisangle(&r))));
            let angle = rng.random_range(0.0..std::f64::consts::PI * 0.999);
            let aa = AxisAngle { v: random_unit(&mut rng) * angle };
            worst[3] = worst[3].max((matrix_to_axisangle(&axisangle_to_matrix(&aa)).v - aa.v).amax());

            worst[4] = worst[4].max(mat_diff(&r, &logquat_to_matrix(&matrix_to_logquat(&r))));

            let pose = sample_pose(&mut rng);
            let bbox = sphere_bbox(&pose.t, 1.0, &k).map_err(|e| e.to_string())?.zoomed();
            let site = encode_site(&pose.t, &bbox, ZOOM_SIZE, &k).map_err(|e| e.to_string())?;
            let t = decode_site(&site, &bbox, ZOOM_SIZE, &k).map_err(|e| e.to_string())?;
            worst[5] = worst[5].max((t - pose.t).amax());

            let allo = ego_to_allo(&pose.rot, &pose.t).map_err(|e| e.to_string())?;
            worst[6] = worst[6].max(mat_diff(&pose.rot, &allo_to_ego(&allo, &pose.t).map_err(|e| e.to_string())?));
        }
        let max = worst.iter().copied().fold(0.0, f64::max);
        let detail = format!(
            "{cases} cases each; max error rot6d {:.1e}, quat {:.1e}, axis-angle {:.1e}/{:.1e}, log-quat {:.1e}, site {:.1e}, ego/allo {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5], worst[6]
        );
        Ok((max < 1e-9, detail))
    })
}

fn random_unit4<R: Rng>(rng: &mut R) -> Quaternion<f64> {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return Quaternion::new(v[0] / n, v[1] / n, v[2] / n, v[3] / n);
        }
    }
}

/// Decodes each foreground pixel's stored object coordinate and projects it back into the image.
pub fn reprojection(samples: usize, seed: u64) -> CheckOutcome {
    timed("rendering reprojection", f64::INFINITY, || {
        let data = generate_dataset(&DatasetSpec::test(samples, seed)).map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        let mut pixels = 0usize;
        for s in &data {
            let crop = s.crop();
            let size = s.maps.size;
            for px in 0..s.maps.pixels() {
                if s.maps.mask[px] == 0 {
                    continue;
                }
                let c = s.maps.coord3d(px);
                let x = Vector3::from_fn(|a, _| c[a] as f64 * SPHERE_EXTENTS[a] - SPHERE_EXTENTS[a] / 2.0);
                let uv = s.k.project(&s.pose.apply(&x));
                let src = pixel_location(&crop, size, px / size, px % size);
                worst = worst.max((uv - src).norm());
                pixels += 1;
            }
        }
        Ok((worst < 0.5, format!("{samples} samples, {pixels} pixels, max reprojection error {worst:.2e} px")))
    })
}

/// Analytic metric values plus `adds <= add` on random pose pairs.
pub fn metrics(pairs: usize, seed: u64) -> CheckOutcome {
    timed("metric oracles", f64::INFINITY, || {
        let id = Pose::new(RotationMatrix::identity(), Vector3::new(0.0, 0.0, 5.0));
        let shifted = Pose::new(RotationMatrix::identity(), Vector3::new(0.3, 0.0, 5.0));
        let half_z = Pose::new(RotationMatrix::rot_z(std::f64::consts::PI), id.t);
        let circle: Vec<Vector3<f64>> = (0..16)
            .map(|i| (i as f64) * std::f64::consts::TAU / 16.0)
            .map(|a| Vector3::new(a.cos(), a.sin(), 0.0))
            .collect();
        let d = 2.0;
        let tilt = Pose::new(RotationMatrix::rot_x(3f64.to_radians()), id.t);
        let sym = [RotationMatrix::identity(), RotationMatrix::rot_z(std::f64::consts::PI)];
        let half_gt = Pose::new(id.rot.compose(&sym[1]), id.t);
        let examples = [
            ("add identical", add_error(&id, &id, &circle), 0.0, 0.0),
            ("add shift", add_error(&shifted, &id, &circle), 0.3, 1e-12),
            ("add half turn", add_error(&half_z, &id, &circle), 2.0, 1e-12),
            ("adds identical", adds_error(&id, &id, &circle), 0.0, 0.0),
            ("recall zeros", add_recall(&[0.0; 4], d, 0.1), 1.0, 0.0),
            ("recall diameters", add_recall(&[d; 4], d, 0.1), 0.0, 0.0),
            ("recall split", add_recall(&[0.05 * d, 0.15 * d], d, 0.1), 0.5, 0.0),
            ("auc zeros", auc_add(&[0.0; 3], 0.1), 1.0, 0.0),
            ("auc above max", auc_add(&[0.1, 0.2], 0.1), 0.0, 0.0),
            ("auc half", auc_add(&[0.05], 0.1), 0.5, 0.0),
            ("n°/n cm identical", ndeg_ncm(&id, &id, &sym[..1], 2.0, 2.0) as u8 as f64, 1.0, 0.0),
            ("n°/n cm 3°", ndeg_ncm(&tilt, &id, &sym[..1], 2.0, 2.0) as u8 as f64, 0.0, 0.0),
            ("n°/n cm symmetric", ndeg_ncm(&half_gt, &id, &sym, 2.0, 2.0) as u8 as f64, 1.0, 0.0),
        ];
        let wrong: Vec<&str> =
            examples.iter().filter(|(_, got, want, tol)| (got - want).abs() > *tol).map(|e| e.0).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut violations = 0;
        for _ in 0..pairs {
            let pts: Vec<Vector3<f64>> = (0..64).map(|_| random_unit(&mut rng) * rng.random_range(0.1..1.0)).collect();
            let (a, b) = (sample_pose(&mut rng), sample_pose(&mut rng));
            if adds_error(&a, &b, &pts) > add_error(&a, &b, &pts) {
                violations += 1;
            }
        }
        let mut detail = format!("{} analytic examples, {pairs} random pairs, {violations} adds > add", examples.len());
        if !wrong.is_empty() {
            detail.push_str(&format!("; wrong: {}", wrong.join(", ")));
        }
        Ok((wrong.is_empty() && violations == 0, detail))
    })
}

/// Trains on one repeated sample with batch 1 and reports the first step whose pose loss is below 1e-3.
pub fn overfit(steps: u64, seed: u64) -> CheckOutcome {
    timed("single-sample overfit", f64::INFINITY, || {
        let data = generate_dataset(&DatasetSpec::train(1, seed)).map_err(|e| e.to_string())?;
        let mut net = PatchPnp::<f32>::new(NetConfig::default(), seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { epochs: steps as usize, batch_size: 1, augment: false, seed, ..TrainConfig::default() };
        let mut state = cfg.optimizer(&net.params, 1);
        let loss = LossConfig::new(RotMode::AlloRot6d, LossMode::DisentangledSite, sphere_model_points());
        let mut first = None;
        let mut last = f64::NAN;
        train(&mut net, &mut state, &data, &[], &[], &cfg, &loss, |s| {
            if first.is_none() && s.loss_pose < 1e-3 {
                first = Some(s.step + 1);
            }
            last = s.loss_pose;
        })
        .map_err(|e| e.to_string())?;
        let detail = match first {
            Some(n) => format!("loss below 1e-3 after {n} steps, {last:.2e} after {steps}"),
            None => format!("loss {last:.2e} after {steps} steps"),
        };
        Ok((first.is_some(), detail))
    })
}

/// The suites run by `selftest`.
pub fn self_test(seed: u64) -> Vec<CheckOutcome> {
    vec![
        epnp_exact(1000, seed),
        ransac_outliers(500, seed),
        gradients(100),
        round_trips(10_000, seed),
        reprojection(100, seed),
        metrics(10_000, seed),
    ]
}
