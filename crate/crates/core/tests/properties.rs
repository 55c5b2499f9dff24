use approx::assert_abs_diff_eq;
use nalgebra::{Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posebench::geometry::*;
use posebench::metrics::{add_error, auc_add, relative_add};
use posebench::pnp::{epnp_solve, ransac_pnp, squared_reprojection_errors, CorrespondenceSet, RansacConfig};
use posebench::synth::{benchmark_camera, farthest_point_sampling, fibonacci_sphere, sample_pose};

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = RotationMatrix<f64>> {
    any::<u64>().prop_map(|s| sample_rotation(&mut ChaCha8Rng::seed_from_u64(s)))
}

fn pose() -> impl Strategy<Value = Pose<f64>> {
    any::<u64>().prop_map(|s| sample_pose(&mut ChaCha8Rng::seed_from_u64(s)))
}

#[test]
fn rot6d_outputs_are_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    while checked < 100_000 {
        let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let r6 = Rot6d::from_slice(&v);
        if r6.r1.norm() < 1e-3 || r6.r1.cross(&r6.r2).norm() < 1e-3 {
            continue;
        }
        let r = rot6d_to_matrix(&r6).unwrap();
        let m = r.matrix();
        assert!((m.transpose() * m - Matrix3::identity()).amax() < 1e-12);
        assert!((m.determinant() - 1.0).abs() < 1e-12);
        checked += 1;
    }
}

proptest! {
    #[test]
    fn rot6d_ignores_the_scale_of_the_first_column(r1 in vec3(), r2 in vec3(), alpha in 0.01..100.0f64) {
        prop_assume!(r1.norm() > 1e-2 && r1.cross(&r2).norm() > 1e-2);
        let a = rot6d_to_matrix(&Rot6d::new(r1, r2)).unwrap();
        let b = rot6d_to_matrix(&Rot6d::new(r1 * alpha, r2)).unwrap();
        prop_assert!((a.matrix() - b.matrix()).amax() < 1e-12);
    }

    #[test]
    fn rot6d_moves_no_faster_than_the_matrix(axis in vec3(), start in -3.0..3.0f64) {
        prop_assume!(axis.norm() > 1e-2);
        let path: Vec<RotationMatrix<f64>> =
            (0..50).map(|i| RotationMatrix::from_axis_angle(&axis.normalize(), start + i as f64 * 0.02)).collect();
        for w in path.windows(2) {
            let d6 = matrix_to_rot6d(&w[1]).to_array().iter().zip(matrix_to_rot6d(&w[0]).to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let dm = (w[1].matrix() - w[0].matrix()).amax();
            prop_assert!(d6 <= dm + 1e-15);
        }
    }

    #[test]
    fn quaternion_double_cover(w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
        let q = Quaternion::new(w, x, y, z);
        prop_assume!(q.norm() > 1e-2);
        let a = quat_to_matrix(&q).unwrap();
        let b = quat_to_matrix(&q.neg()).unwrap();
        prop_assert!((a.matrix() - b.matrix()).amax() < 1e-15);
    }

    #[test]
    fn parameterizations_invert(r in rotation()) {
        for back in [
            rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap(),
            quat_to_matrix(&matrix_to_quat(&r)).unwrap(),
            axisangle_to_matrix(&matrix_to_axisangle(&r)),
            logquat_to_matrix(&matrix_to_logquat(&r)),
        ] {
            prop_assert!((back.matrix() - r.matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn ego_allo_invert(p in pose()) {
        let allo = ego_to_allo(&p.rot, &p.t).unwrap();
        prop_assert!((allo_to_ego(&allo, &p.t).unwrap().matrix() - p.rot.matrix()).amax() < 1e-9);
        let ego = allo_to_ego(&p.rot, &p.t).unwrap();
        prop_assert!((ego_to_allo(&ego, &p.t).unwrap().matrix() - p.rot.matrix()).amax() < 1e-9);
    }

    #[test]
    fn backprojection_inverts_projection(x in -3.0..3.0f64, y in -3.0..3.0f64, z in 0.5..20.0f64) {
        let k = benchmark_camera();
        let t = Vector3::new(x, y, z);
        let o = k.project(&t);
        let back = backproject_center(&o, t.z, &k).unwrap();
        prop_assert!((back - t).amax() < 1e-9);
        prop_assert!((k.project(&back) - o).amax() < 1e-9);
    }

    #[test]
    fn site_inverts(p in pose(), u in prop::array::uniform4(-1.0..1.0f64)) {
        let k = benchmark_camera();
        let tight = posebench::synth::sphere_bbox(&p.t, 1.0, &k).unwrap();
        let crop = dynamic_zoom_in_with(&tight, u).zoomed();
        let s = encode_site(&p.t, &crop, 256.0, &k).unwrap();
        prop_assert!((decode_site(&s, &crop, 256.0, &k).unwrap() - p.t).amax() < 1e-9);
    }

    #[test]
    fn epnp_commutes_with_scene_scale(p in pose(), seed in any::<u64>(), s in 0.1..10.0f64) {
        let k = benchmark_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vector3<f64>> = (0..10).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let uv: Vec<Vector2<f64>> = pts.iter().map(|x| k.project(&p.apply(x))).collect();
        let a = epnp_solve(&CorrespondenceSet::new(pts.clone(), uv.clone()).unwrap(), &k).unwrap();
        let scaled: Vec<Vector3<f64>> = pts.iter().map(|x| x * s).collect();
        let b = epnp_solve(&CorrespondenceSet::new(scaled, uv).unwrap(), &k).unwrap();
        prop_assert!(b.rot.angle_to(&a.rot) < 1e-7);
        prop_assert!((b.t - a.t * s).norm() < 1e-7 * s.max(1.0));
    }

    #[test]
    fn ransac_inliers_fit_within_threshold(p in pose(), seed in any::<u64>()) {
        let k = benchmark_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vector3<f64>> = fibonacci_sphere(60);
        let uv: Vec<Vector2<f64>> = pts
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let jitter = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let outlier = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                if i % 4 == 0 { outlier } else { k.project(&p.apply(x)) + jitter }
            })
            .collect();
        let c = CorrespondenceSet::new(pts, uv).unwrap();
        let cfg = RansacConfig { seed, ..RansacConfig::default() };
        let out = ransac_pnp(&c, &k, &cfg).unwrap();
        let errs = squared_reprojection_errors(&out.pose, &c, &k);
        let inl: Vec<f64> = errs.iter().zip(&out.inliers).filter(|(_, &m)| m).map(|(e, _)| *e).collect();
        prop_assert!(!inl.is_empty());
        let rms = (inl.iter().sum::<f64>() / inl.len() as f64).sqrt();
        prop_assert!(rms <= cfg.reproj_threshold);
    }

    #[test]
    fn add_ignores_a_common_world_transform(a in pose(), b in pose(), g in pose()) {
        let pts = fibonacci_sphere(64);
        let ga = Pose::new(g.rot.compose(&a.rot), g.apply(&a.t));
        let gb = Pose::new(g.rot.compose(&b.rot), g.apply(&b.t));
        prop_assert!((add_error(&ga, &gb, &pts) - add_error(&a, &b, &pts)).abs() < 1e-9);
    }

    #[test]
    fn relative_add_ignores_scene_scale(a in pose(), b in pose(), s in 0.01..100.0f64) {
        let pts = fibonacci_sphere(64);
        let scaled: Vec<Vector3<f64>> = pts.iter().map(|x| x * s).collect();
        let sa = Pose::new(a.rot, a.t * s);
        let sb = Pose::new(b.rot, b.t * s);
        let base = relative_add(&a, &b, &pts, 2.0);
        prop_assert!((relative_add(&sa, &sb, &scaled, 2.0 * s) - base).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn auc_never_increases_with_an_error(errs in prop::collection::vec(0.0..0.2f64, 1..20), i in any::<prop::sample::Index>(), bump in 0.0..0.1f64) {
        let mut worse = errs.clone();
        let j = i.index(errs.len());
        worse[j] += bump;
        prop_assert!(auc_add(&worse, 0.1) <= auc_add(&errs, 0.1));
    }
}

#[test]
fn fps_ignores_candidate_order_after_the_first_pick() {
    let pts = fibonacci_sphere(500);
    let base: Vec<Vector3<f64>> = farthest_point_sampling(&pts, 32, 0).into_iter().map(|i| pts[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut perm: Vec<usize> = (1..pts.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = vec![pts[0]];
        shuffled.extend(perm.iter().map(|&i| pts[i]));
        let got: Vec<Vector3<f64>> =
            farthest_point_sampling(&shuffled, 32, 0).into_iter().map(|i| shuffled[i]).collect();
        for (a, b) in got.iter().zip(&base) {
            assert_abs_diff_eq!(a, b, epsilon = 0.0);
        }
    }
}
