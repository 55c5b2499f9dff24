//! Pose error metrics: ADD, ADD-S, recall, AUC and the n°/n cm criterion.

use nalgebra::Vector3;

use crate::geometry::{Pose, RotationMatrix};
use crate::scalar::Real;

/// Per-sample errors of one pose estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub add: f64,
    pub add_s: f64,
    /// Geodesic rotation error in radians.
    pub rot_err: f64,
    pub trans_err: f64,
    pub diameter: f64,
}

impl EvalResult {
    pub fn compute(pose_hat: &Pose<f64>, pose_gt: &Pose<f64>, model_points: &[Vector3<f64>], diameter: f64) -> Self {
        Self {
            add: add_error(pose_hat, pose_gt, model_points),
            add_s: adds_error(pose_hat, pose_gt, model_points),
            rot_err: pose_hat.rot.angle_to(&pose_gt.rot),
            trans_err: (pose_hat.t - pose_gt.t).norm(),
            diameter,
        }
    }

    pub fn relative_add(&self) -> f64 {
        self.add / self.diameter
    }
}

/// Mean distance between corresponding transformed model points.
pub fn add_error<T: Real>(pose_hat: &Pose<T>, pose_gt: &Pose<T>, model_points: &[Vector3<T>]) -> T {
    assert!(!model_points.is_empty(), "model point set must not be empty");
    let sum = model_points.iter().fold(T::zero(), |acc, x| acc + (pose_hat.apply(x) - pose_gt.apply(x)).norm());
    sum / T::lit(model_points.len() as f64)
}

/// ADD divided by the object diameter.
pub fn relative_add<T: Real>(pose_hat: &Pose<T>, pose_gt: &Pose<T>, model_points: &[Vector3<T>], diameter: T) -> T {
    add_error(pose_hat, pose_gt, model_points) / diameter
}

/// Mean distance from each transformed ground-truth point to the closest
/// transformed predicted point (brute force).
pub fn adds_error<T: Real>(pose_hat: &Pose<T>, pose_gt: &Pose<T>, model_points: &[Vector3<T>]) -> T {
    assert!(!model_points.is_empty(), "model point set must not be empty");
    let pred: Vec<Vector3<T>> = model_points.iter().map(|x| pose_hat.apply(x)).collect();
    let sum = model_points.iter().fold(T::zero(), |acc, x| {
        let g = pose_gt.apply(x);
        let nearest = pred
            .iter()
            .map(|p| (p - g).norm_squared())
            .fold(None, |best: Option<T>, d| Some(best.map_or(d, |b| b.min(d))))
            .expect("non-empty");
        acc + nearest.sqrt()
    });
    sum / T::lit(model_points.len() as f64)
}

/// Fraction of errors strictly below `threshold_frac * diameter`.
pub fn add_recall(errors: &[f64], diameter: f64, threshold_frac: f64) -> f64 {
    assert!(diameter > 0.0, "diameter must be positive");
    if errors.is_empty() {
        return 0.0;
    }
    let thr = threshold_frac * diameter;
    errors.iter().filter(|&&e| e < thr).count() as f64 / errors.len() as f64
}

/// Area under the recall-vs-threshold curve on `[0, max_threshold]`, normalized to `[0, 1]`.
///
/// The recall curve is the empirical step function, so the integral is exact:
/// each error contributes `(max - min(e, max)) / max`.
pub fn auc_add(errors: &[f64], max_threshold: f64) -> f64 {
    assert!(max_threshold > 0.0, "max threshold must be positive");
    if errors.is_empty() {
        return 0.0;
    }
    let total: f64 = errors.iter().map(|&e| (max_threshold - e.max(0.0).min(max_threshold)) / max_threshold).sum();
    total / errors.len() as f64
}

/// Smallest geodesic rotation error over the symmetric ground-truth rotations.
pub fn symmetric_rotation_error<T: Real>(
    r_hat: &RotationMatrix<T>,
    r_gt: &RotationMatrix<T>,
    symmetry_set: &[RotationMatrix<T>],
) -> T {
    symmetry_set
        .iter()
        .map(|s| r_hat.angle_to(&r_gt.compose(s)))
        .fold(None, |best: Option<T>, e| Some(best.map_or(e, |b| b.min(e))))
        .unwrap_or_else(|| r_hat.angle_to(r_gt))
}

/// True iff the rotation error is below `n_deg` degrees and the translation
/// error below `n_cm` centimeters (translations in meters).
pub fn ndeg_ncm(
    pose_hat: &Pose<f64>,
    pose_gt: &Pose<f64>,
    symmetry_set: &[RotationMatrix<f64>],
    n_deg: f64,
    n_cm: f64,
) -> bool {
    let rot = symmetric_rotation_error(&pose_hat.rot, &pose_gt.rot, symmetry_set).to_degrees();
    let trans = (pose_hat.t - pose_gt.t).norm() * 100.0;
    rot < n_deg && trans < n_cm
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn circle(n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect()
    }

    fn pose(rot: RotationMatrix<f64>, t: [f64; 3]) -> Pose<f64> {
        Pose::new(rot, Vector3::from(t))
    }

    #[test]
    fn add_examples() {
        let pts = circle(36);
        let gt = pose(RotationMatrix::rot_x(0.3), [0.1, 0.2, 5.0]);
        assert_eq!(add_error(&gt, &gt, &pts), 0.0);
        let shifted = pose(gt.rot, [0.1 + 0.25, 0.2, 5.0]);
        assert!((add_error(&shifted, &gt, &pts) - 0.25).abs() < 1e-12);
        let a = pose(RotationMatrix::identity(), [0.0, 0.0, 5.0]);
        let b = pose(RotationMatrix::rot_z(PI), [0.0, 0.0, 5.0]);
        assert!((add_error(&b, &a, &pts) - 2.0).abs() < 1e-12);
        // a half turn maps the symmetric circle onto itself
        assert!(adds_error(&b, &a, &pts) < 1e-9);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(add_recall(&[0.0, 0.0, 0.0], 2.0, 0.1), 1.0);
        assert_eq!(add_recall(&[2.0, 2.0], 2.0, 0.1), 0.0);
        assert_eq!(add_recall(&[0.05 * 2.0, 0.15 * 2.0], 2.0, 0.1), 0.5);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_add(&[0.0; 5], 0.1), 1.0);
        assert_eq!(auc_add(&[0.1, 0.2, 7.0], 0.1), 0.0);
        assert_eq!(auc_add(&[0.05], 0.1), 0.5);
    }

    #[test]
    fn ndeg_ncm_examples() {
        let gt = pose(RotationMatrix::rot_y(0.4), [0.0, 0.0, 1.0]);
        let id = [RotationMatrix::identity()];
        assert!(ndeg_ncm(&gt, &gt, &id, 1e-3, 1e-3));
        let off = pose(gt.rot.compose(&RotationMatrix::rot_x(3f64.to_radians())), [0.0, 0.0, 1.0]);
        assert!(!ndeg_ncm(&off, &gt, &id, 2.0, 2.0));
        let sym = [RotationMatrix::identity(), RotationMatrix::rot_z(PI)];
        let flipped = pose(gt.rot.compose(&RotationMatrix::rot_z(PI)), [0.0, 0.0, 1.0]);
        assert!(symmetric_rotation_error(&flipped.rot, &gt.rot, &sym) < 1e-12);
        assert!(ndeg_ncm(&flipped, &gt, &sym, 2.0, 2.0));
        assert!(!ndeg_ncm(&flipped, &gt, &id, 2.0, 2.0));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
