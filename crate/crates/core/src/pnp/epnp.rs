//! EPnP: points as barycentric combinations of control points, camera-frame
//! control points from the null space of a linear system, scale from the
//! preserved control-point distances.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use super::{squared_reprojection_errors, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, RotationMatrix};
use crate::scalar::Real;

/// Gauss-Newton iterations applied to each β estimate.
pub const GAUSS_NEWTON_ITERATIONS: usize = 10;

/// Relative eigenvalue below which the point cloud is treated as planar.
const PLANAR_TOL: f64 = 1e-10;
/// Relative eigenvalue below which a second point axis is missing (collinear points).
const COLLINEAR_TOL: f64 = 1e-12;
/// Relative eigenvalue below which `MᵀM` has an unexpectedly large null space.
const RANK_TOL: f64 = 1e-14;

fn failure(msg: &str) -> Error {
    Error::SolverFailure(msg.to_string())
}

struct ControlFrame<T: Real> {
    world: Vec<Vector3<T>>,
    alphas: Vec<[T; 4]>,
}

impl<T: Real> ControlFrame<T> {
    fn count(&self) -> usize {
        self.world.len()
    }
}

/// Control points along the principal axes of the (weighted) point cloud.
fn control_frame<T: Real>(c: &CorrespondenceSet<T>) -> Result<ControlFrame<T>> {
    let n = c.len();
    let wsum = (0..n).fold(T::zero(), |acc, i| acc + c.weight(i));
    if !(wsum > T::zero()) {
        return Err(failure("all correspondence weights are zero"));
    }
    let centroid = (0..n).fold(Vector3::zeros(), |acc, i| acc + c.pts3d[i] * c.weight(i)) / wsum;
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        let d = c.pts3d[i] - centroid;
        cov += d * d.transpose() * c.weight(i);
    }
    cov /= wsum;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
    let lambda: Vec<T> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let axes: Vec<Vector3<T>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    if !(lambda[0] > T::zero()) {
        return Err(failure("all 3D points coincide"));
    }
    if lambda[1] <= T::lit(COLLINEAR_TOL) * lambda[0] {
        return Err(failure("3D points are collinear"));
    }
    let n_axes = if lambda[2] <= T::lit(PLANAR_TOL) * lambda[0] { 2 } else { 3 };

    let scales: Vec<T> = lambda[..n_axes].iter().map(|l| l.sqrt()).collect();
    let mut world = vec![centroid];
    world.extend((0..n_axes).map(|j| centroid + axes[j] * scales[j]));
    let alphas = c
        .pts3d
        .iter()
        .map(|p| {
            let d = p - centroid;
            let mut a = [T::zero(); 4];
            let mut rest = T::one();
            for j in 0..n_axes {
                a[j + 1] = axes[j].dot(&d) / scales[j];
                rest -= a[j + 1];
            }
            a[0] = rest;
            a
        })
        .collect();
    Ok(ControlFrame { world, alphas })
}

/// `MᵀM` of the 2N x 3nc projection system in normalized image coordinates.
fn projection_normal_matrix<T: Real>(
    c: &CorrespondenceSet<T>,
    frame: &ControlFrame<T>,
    k: &CameraIntrinsics<T>,
) -> DMatrix<T> {
    let nc = frame.count();
    let dim = 3 * nc;
    let mut mtm = DMatrix::zeros(dim, dim);
    let mut r1 = DVector::zeros(dim);
    let mut r2 = DVector::zeros(dim);
    for (i, uv) in c.pts2d.iter().enumerate() {
        let u = (uv.x - k.cx) / k.fx;
        let v = (uv.y - k.cy) / k.fy;
        let a = &frame.alphas[i];
        for j in 0..nc {
            r1[3 * j] = a[j];
            r1[3 * j + 2] = -a[j] * u;
            r2[3 * j + 1] = a[j];
            r2[3 * j + 2] = -a[j] * v;
        }
        let w = c.weight(i);
        mtm.ger(w, &r1, &r1, T::one());
        mtm.ger(w, &r2, &r2, T::one());
    }
    mtm
}

/// Differences of null-vector blocks for every control-point pair: `d[pair][a]`.
fn pair_differences<T: Real>(null: &[DVector<T>], nc: usize) -> (Vec<(usize, usize)>, Vec<Vec<Vector3<T>>>) {
    let mut pairs = Vec::new();
    for i in 0..nc {
        for j in (i + 1)..nc {
            pairs.push((i, j));
        }
    }
    let diffs = pairs
        .iter()
        .map(|&(i, j)| {
            null.iter()
                .map(|v| Vector3::new(v[3 * i] - v[3 * j], v[3 * i + 1] - v[3 * j + 1], v[3 * i + 2] - v[3 * j + 2]))
                .collect()
        })
        .collect();
    (pairs, diffs)
}

/// Linearized β estimate using the first `k` null vectors.
fn linear_betas<T: Real>(diffs: &[Vec<Vector3<T>>], rho: &[T], k: usize, n_betas: usize) -> Option<Vec<T>> {
    let mut products = Vec::new();
    for a in 0..k {
        for b in a..k {
            products.push((a, b));
        }
    }
    let l = DMatrix::from_fn(rho.len(), products.len(), |p, col| {
        let (a, b) = products[col];
        let d = diffs[p][a].dot(&diffs[p][b]);
        if a == b {
            d
        } else {
            d * T::lit(2.0)
        }
    });
    let rhs = DVector::from_column_slice(rho);
    let x = l.svd(true, true).solve(&rhs, T::lit(1e-14)).ok()?;
    let b00 = x[0];
    let beta0 = b00.abs().sqrt();
    let mut betas = vec![T::zero(); n_betas];
    betas[0] = beta0;
    if beta0 > T::zero() {
        for a in 1..k {
            // product (0, a) sits at column a of the triangular enumeration
            betas[a] = x[a] / beta0;
        }
    }
    Some(betas)
}

/// Least-squares scale for null vector `a` alone.
fn single_vector_betas<T: Real>(diffs: &[Vec<Vector3<T>>], rho: &[T], a: usize, n_betas: usize) -> Option<Vec<T>> {
    let (mut num, mut den) = (T::zero(), T::zero());
    for (d, &r) in diffs.iter().zip(rho) {
        let q = d[a].norm_squared();
        num += q * r;
        den += q * q;
    }
    if !(den > T::zero()) {
        return None;
    }
    let mut betas = vec![T::zero(); n_betas];
    betas[a] = (num / den).sqrt();
    Some(betas)
}

/// Refines β by Gauss-Newton on the control-point distance residuals.
fn refine_betas<T: Real>(diffs: &[Vec<Vector3<T>>], rho: &[T], mut betas: Vec<T>) -> Vec<T> {
    let nb = betas.len();
    for _ in 0..GAUSS_NEWTON_ITERATIONS {
        let mut jac = DMatrix::zeros(rho.len(), nb);
        let mut res = DVector::zeros(rho.len());
        for (p, d) in diffs.iter().enumerate() {
            let s = (0..nb).fold(Vector3::zeros(), |acc, a| acc + d[a] * betas[a]);
            res[p] = s.norm_squared() - rho[p];
            for a in 0..nb {
                jac[(p, a)] = s.dot(&d[a]) * T::lit(2.0);
            }
        }
        let Ok(step) = jac.svd(true, true).solve(&(-res), T::lit(1e-14)) else {
            break;
        };
        if !step.iter().all(|x| x.is_finite()) {
            break;
        }
        for a in 0..nb {
            betas[a] += step[a];
        }
    }
    betas
}

/// Weighted rigid alignment (Horn/Umeyama without scale) of `src` onto `dst`.
fn procrustes<T: Real>(src: &[Vector3<T>], dst: &[Vector3<T>], c: &CorrespondenceSet<T>) -> Option<Pose<T>> {
    let n = src.len();
    let wsum = (0..n).fold(T::zero(), |acc, i| acc + c.weight(i));
    let cs = (0..n).fold(Vector3::zeros(), |acc, i| acc + src[i] * c.weight(i)) / wsum;
    let cd = (0..n).fold(Vector3::zeros(), |acc, i| acc + dst[i] * c.weight(i)) / wsum;
    let mut h = Matrix3::zeros();
    for i in 0..n {
        h += (dst[i] - cd) * (src[i] - cs).transpose() * c.weight(i);
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        fix[(2, 2)] = -T::one();
    }
    let r = u * fix * v_t;
    let t = cd - r * cs;
    Some(Pose::new(RotationMatrix::from_matrix_unchecked(r), t))
}

fn pose_from_betas<T: Real>(
    c: &CorrespondenceSet<T>,
    frame: &ControlFrame<T>,
    null: &[DVector<T>],
    betas: &[T],
) -> Option<Pose<T>> {
    let nc = frame.count();
    let ctrl: Vec<Vector3<T>> = (0..nc)
        .map(|j| {
            (0..betas.len()).fold(Vector3::zeros(), |acc, a| {
                acc + Vector3::new(null[a][3 * j], null[a][3 * j + 1], null[a][3 * j + 2]) * betas[a]
            })
        })
        .collect();
    let mut cam: Vec<Vector3<T>> =
        frame.alphas.iter().map(|a| (0..nc).fold(Vector3::zeros(), |acc, j| acc + ctrl[j] * a[j])).collect();
    let depth = cam.iter().fold(T::zero(), |acc, p| acc + p.z);
    if depth < T::zero() {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    procrustes(&c.pts3d, &cam, c)
}

fn weighted_reprojection<T: Real>(pose: &Pose<T>, c: &CorrespondenceSet<T>, k: &CameraIntrinsics<T>) -> T {
    let errs = squared_reprojection_errors(pose, c, k);
    let (mut num, mut den) = (T::zero(), T::zero());
    for (i, e) in errs.into_iter().enumerate() {
        num += e * c.weight(i);
        den += c.weight(i);
    }
    num / den
}

/// Solves for the object pose from at least four 2D-3D correspondences.
///
/// Non-planar clouds use four control points and β cases N = 1..4; planar
/// clouds use three control points and cases N = 1..3. Each null vector on
/// its own is tried as an extra starting point, which helps with minimal
/// samples. Every start is refined by Gauss-Newton and the one with the lowest
/// reprojection error wins (ties go to the earlier start).
pub fn epnp_solve<T: Real>(c: &CorrespondenceSet<T>, k: &CameraIntrinsics<T>) -> Result<Pose<T>> {
    c.validate()?;
    let frame = control_frame(c)?;
    let nc = frame.count();
    let mtm = projection_normal_matrix(c, &frame, k);
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..3 * nc).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap_or(std::cmp::Ordering::Equal));
    let lmax = eig.eigenvalues[order[3 * nc - 1]];
    if !(lmax > T::zero()) || !lmax.is_finite() {
        return Err(failure("projection system is empty"));
    }
    if eig.eigenvalues[order[nc]] <= T::lit(RANK_TOL) * lmax {
        return Err(failure("projection system is rank deficient"));
    }
    let null: Vec<DVector<T>> = order[..nc].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let (pairs, diffs) = pair_differences(&null, nc);
    let rho: Vec<T> = pairs.iter().map(|&(i, j)| (frame.world[i] - frame.world[j]).norm_squared()).collect();

    let mut starts: Vec<Vec<T>> = (1..=nc).filter_map(|case| linear_betas(&diffs, &rho, case, nc)).collect();
    starts.extend((0..nc).filter_map(|a| single_vector_betas(&diffs, &rho, a, nc)));
    let mut best: Option<(T, Pose<T>)> = None;
    for betas in starts {
        let betas = refine_betas(&diffs, &rho, betas);
        let Some(pose) = pose_from_betas(c, &frame, &null, &betas) else {
            continue;
        };
        let err = weighted_reprojection(&pose, c, k);
        if !err.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| failure("no β case produced a valid pose"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_rotation;
    use crate::synth::{benchmark_camera, sample_pose, stream_rng};
    use nalgebra::Vector2;
    use rand::Rng;

    fn project_all(pose: &Pose<f64>, pts: &[Vector3<f64>]) -> CorrespondenceSet<f64> {
        let k = benchmark_camera();
        let pts2d = pts.iter().map(|p| k.project(&pose.apply(p))).collect();
        CorrespondenceSet::new(pts.to_vec(), pts2d).unwrap()
    }

    #[test]
    fn exact_recovery_from_sphere_points() {
        let mut rng = stream_rng(1, 0);
        for _ in 0..50 {
            let pose = sample_pose(&mut rng);
            let pts: Vec<_> = (0..12).map(|_| sample_rotation::<f64, _>(&mut rng).apply(&Vector3::z())).collect();
            let est = epnp_solve(&project_all(&pose, &pts), &benchmark_camera()).unwrap();
            assert!(est.rot.angle_to(&pose.rot) < 1e-6);
            assert!((est.t - pose.t).norm() < 1e-6);
        }
    }

    #[test]
    fn planar_points_on_axis() {
        let mut rng = stream_rng(2, 0);
        let pts: Vec<_> =
            (0..10).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0)).collect();
        let pose = Pose::new(RotationMatrix::identity(), Vector3::new(0.0, 0.0, 5.0));
        let est = epnp_solve(&project_all(&pose, &pts), &benchmark_camera()).unwrap();
        assert!((est.t.z - 5.0).abs() < 1e-6);
        assert!(est.rot.angle_to(&pose.rot) < 1e-6);
    }

    #[test]
    fn minimal_four_points() {
        let mut rng = stream_rng(3, 0);
        let mut ok = 0;
        for _ in 0..500 {
            let pose = sample_pose(&mut rng);
            let pts: Vec<_> = (0..4).map(|_| sample_rotation::<f64, _>(&mut rng).apply(&Vector3::z())).collect();
            if let Ok(est) = epnp_solve(&project_all(&pose, &pts), &benchmark_camera()) {
                if est.rot.angle_to(&pose.rot) < 1e-6 {
                    ok += 1;
                }
            }
        }
        // a handful of minimal configurations stay ambiguous for the distance constraints
        assert!(ok >= 480, "{ok}");
    }

    #[test]
    fn degenerate_inputs_fail() {
        let k = benchmark_camera();
        let same =
            CorrespondenceSet::new(vec![Vector3::new(1.0, 2.0, 3.0); 6], vec![Vector2::new(1.0, 1.0); 6]).unwrap();
        assert!(matches!(epnp_solve(&same, &k), Err(Error::SolverFailure(_))));
        let line: Vec<_> = (0..6).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let c = CorrespondenceSet::new(line, vec![Vector2::new(1.0, 1.0); 6]).unwrap();
        assert!(matches!(epnp_solve(&c, &k), Err(Error::SolverFailure(_))));
        assert!(CorrespondenceSet::new(vec![Vector3::<f64>::zeros(); 3], vec![Vector2::zeros(); 3]).is_err());
    }
}
