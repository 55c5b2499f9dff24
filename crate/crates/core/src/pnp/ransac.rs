use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{epnp_solve, squared_reprojection_errors, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::scalar::Real;

/// Hypothesize-and-verify settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on the reprojection error, in pixels.
    pub reproj_threshold: f64,
    pub confidence: f64,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 100, reproj_threshold: 3.0, confidence: 0.99, sample_size: 4, seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations >= 1
            && self.reproj_threshold > 0.0
            && self.confidence > 0.0
            && self.confidence < 1.0
            && self.sample_size >= 4;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid RANSAC configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutput<T: Real> {
    pub pose: Pose<T>,
    pub inliers: Vec<bool>,
    /// Hypotheses evaluated before the confidence bound or the budget stopped the loop.
    pub iterations: usize,
    /// Truncated mean squared reprojection error of the best hypothesis.
    pub best_cost: f64,
}

impl<T: Real> RansacOutput<T> {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Hypotheses needed to draw one all-inlier sample with probability `confidence`.
fn required_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    let p_good = inlier_ratio.powi(sample_size as i32);
    if p_good >= 1.0 {
        return 0;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        n.ceil().max(0.0) as usize
    } else {
        usize::MAX
    }
}

struct Scored<T: Real> {
    pose: Pose<T>,
    cost: f64,
    inliers: Vec<bool>,
}

fn score<T: Real>(pose: Pose<T>, c: &CorrespondenceSet<T>, k: &CameraIntrinsics<T>, thr2: f64) -> Scored<T> {
    let errs = squared_reprojection_errors(&pose, c, k);
    let mut cost = 0.0;
    let inliers = errs
        .iter()
        .map(|e| {
            let e = e.as_f64();
            cost += e.min(thr2);
            e < thr2
        })
        .collect();
    Scored { pose, cost: cost / c.len() as f64, inliers }
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// EPnP inside a RANSAC loop.
///
/// Hypotheses come from minimal samples drawn with a generator seeded by
/// `cfg.seed`. Each is scored by the truncated squared reprojection error
/// (inliers contribute their error, outliers the threshold), so the best cost
/// can only improve as more hypotheses are tried. The loop stops early once
/// the inlier ratio of the best hypothesis meets the confidence bound, and the
/// winner is refit with EPnP on its inliers.
pub fn ransac_pnp<T: Real>(
    c: &CorrespondenceSet<T>,
    k: &CameraIntrinsics<T>,
    cfg: &RansacConfig,
) -> Result<RansacOutput<T>> {
    cfg.validate()?;
    c.validate()?;
    let n = c.len();
    if n < cfg.sample_size {
        return Err(Error::SolverFailure(format!("{n} correspondences for samples of {}", cfg.sample_size)));
    }
    let thr2 = cfg.reproj_threshold * cfg.reproj_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Scored<T>> = None;
    let mut required = usize::MAX;
    let mut run = 0;
    while run < cfg.iterations && run < required {
        run += 1;
        let sample = index::sample(&mut rng, n, cfg.sample_size).into_vec();
        let Ok(pose) = epnp_solve(&c.subset(&sample), k) else {
            continue;
        };
        let s = score(pose, c, k, thr2);
        if best.as_ref().is_none_or(|b| s.cost < b.cost) {
            required = required_iterations(count(&s.inliers) as f64 / n as f64, cfg.sample_size, cfg.confidence);
            best = Some(s);
        }
    }
    let best = best.ok_or_else(|| Error::SolverFailure("every minimal sample was degenerate".into()))?;
    let best_cost = best.cost;

    let inlier_idx: Vec<usize> = (0..n).filter(|&i| best.inliers[i]).collect();
    let mut chosen = best;
    if inlier_idx.len() >= cfg.sample_size {
        if let Ok(pose) = epnp_solve(&c.subset(&inlier_idx), k) {
            let refit = score(pose, c, k, thr2);
            if count(&refit.inliers) >= count(&chosen.inliers) {
                chosen = refit;
            }
        }
    }
    if count(&chosen.inliers) < cfg.sample_size {
        return Err(Error::SolverFailure(format!(
            "best hypothesis has {} inliers, fewer than the sample size",
            count(&chosen.inliers)
        )));
    }
    Ok(RansacOutput { pose: chosen.pose, inliers: chosen.inliers, iterations: run, best_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_rotation;
    use crate::pnp::epnp_solve;
    use crate::synth::{benchmark_camera, sample_pose, stream_rng};
    use nalgebra::{Vector2, Vector3};
    use rand::Rng;

    fn scene(seed: u64, n: usize, outlier_ratio: f64) -> (Pose<f64>, CorrespondenceSet<f64>, Vec<bool>) {
        let mut rng = stream_rng(seed, 0);
        let k = benchmark_camera();
        let pose = sample_pose(&mut rng);
        let pts3d: Vec<_> = (0..n).map(|_| sample_rotation::<f64, _>(&mut rng).apply(&Vector3::z())).collect();
        let mut clean = vec![true; n];
        let mut pts2d = Vec::with_capacity(n);
        for (i, p) in pts3d.iter().enumerate() {
            let mut uv = k.project(&pose.apply(p));
            if rng.random::<f64>() < outlier_ratio {
                clean[i] = false;
                uv += Vector2::new(rng.random_range(40.0..200.0), rng.random_range(-200.0..200.0));
            }
            pts2d.push(uv);
        }
        (pose, CorrespondenceSet::new(pts3d, pts2d).unwrap(), clean)
    }

    #[test]
    fn required_iterations_bounds() {
        assert_eq!(required_iterations(1.0, 4, 0.99), 0);
        assert_eq!(required_iterations(0.0, 4, 0.99), usize::MAX);
        // 0.5^4 = 1/16: ln(0.01)/ln(15/16) = 71.4
        assert_eq!(required_iterations(0.5, 4, 0.99), 72);
    }

    #[test]
    fn config_validation() {
        assert!(RansacConfig::default().validate().is_ok());
        assert!(RansacConfig { sample_size: 3, ..Default::default() }.validate().is_err());
        assert!(RansacConfig { confidence: 1.0, ..Default::default() }.validate().is_err());
        assert!(RansacConfig { iterations: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn clean_input_matches_direct_solve() {
        let (_, c, _) = scene(5, 200, 0.0);
        let k = benchmark_camera();
        let out = ransac_pnp(&c, &k, &RansacConfig::default()).unwrap();
        let direct = epnp_solve(&c, &k).unwrap();
        assert!(out.inliers.iter().all(|&b| b));
        assert!((out.pose.rot.matrix() - direct.rot.matrix()).abs().max() < 1e-9);
        assert!((out.pose.t - direct.t).abs().max() < 1e-9);
    }

    #[test]
    fn rejects_gross_outliers() {
        let k = benchmark_camera();
        for seed in 0..20 {
            let (pose, c, clean) = scene(100 + seed, 300, 0.3);
            let out = ransac_pnp(&c, &k, &RansacConfig { seed, ..Default::default() }).unwrap();
            assert!(out.pose.rot.angle_to(&pose.rot) < 1e-6);
            assert_eq!(out.inliers, clean);
        }
    }

    #[test]
    fn deterministic_and_monotone() {
        let k = benchmark_camera();
        let (_, c, _) = scene(9, 150, 0.5);
        let cfg = RansacConfig { confidence: 0.999999, ..Default::default() };
        assert_eq!(ransac_pnp(&c, &k, &cfg).unwrap(), ransac_pnp(&c, &k, &cfg).unwrap());
        let mut prev = f64::INFINITY;
        for iterations in [1, 2, 5, 10, 30, 100] {
            // a tiny budget may only see contaminated samples
            match ransac_pnp(&c, &k, &RansacConfig { iterations, ..cfg }) {
                Ok(out) => {
                    assert!(out.best_cost <= prev);
                    prev = out.best_cost;
                }
                Err(_) => assert!(prev.is_infinite()),
            }
        }
    }
}
