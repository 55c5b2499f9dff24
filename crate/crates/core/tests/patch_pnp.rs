use approx::assert_abs_diff_eq;
use nalgebra::Vector3;
use posebench::geometry::{ego_to_allo, encode_site, RotationMatrix};
use posebench::nn::{Graph, Tensor};
use posebench::patch_pnp::{
    decode_pose, loss_pose, loss_rot, loss_rot_sym, mean_site, predict_pose, train, LossConfig, LossMode, NetConfig,
    PatchPnp, PoseTarget, RotMode, TrainConfig, ZOOM_SIZE,
};
use posebench::synth::{generate_dataset, sample_pose, sphere_bbox, sphere_model_points, DatasetSpec, SphereSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(rot_mode: RotMode) -> NetConfig {
    NetConfig { rot_mode, sra_regions: 0, conv_width: 32, hidden: 32, ..NetConfig::default() }
}

fn samples(n: usize, seed: u64) -> Vec<SphereSample> {
    let mut spec = DatasetSpec::train(n, seed);
    spec.n_regions = 8;
    generate_dataset(&spec).unwrap()
}

fn target(s: &SphereSample) -> PoseTarget {
    PoseTarget { pose: s.pose, crop: s.crop(), k: s.k }
}

/// Head outputs that decode exactly to the ground truth of `tg`.
fn exact_heads(mode: RotMode, tg: &[PoseTarget]) -> (Tensor<f64>, Tensor<f64>) {
    let mut rot = Vec::new();
    let mut site = Vec::new();
    for t in tg {
        let r = if mode.is_allocentric() { ego_to_allo(&t.pose.rot, &t.pose.t).unwrap() } else { t.pose.rot };
        rot.extend(mode.encode(&r));
        let s = encode_site(&t.pose.t, &t.crop, ZOOM_SIZE, &t.k).unwrap();
        site.extend([s.dx, s.dy, s.dz]);
    }
    (Tensor::new(&[tg.len(), mode.dim()], rot).unwrap(), Tensor::new(&[tg.len(), 3], site).unwrap())
}

fn eval_loss(cfg: &LossConfig, tg: &[PoseTarget], rot: Tensor<f64>, site: Tensor<f64>) -> (f64, f64, f64, f64) {
    let mut g = Graph::new();
    let (r, s) = (g.input(rot), g.input(site));
    let terms = loss_pose(&mut g, r, s, tg, ZOOM_SIZE, cfg).unwrap();
    (g.value(terms.total).item(), terms.rot, terms.center, terms.z)
}

#[test]
fn graph_decode_matches_plain_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in RotMode::ALL {
        let b = 16;
        let out: Vec<f64> = (0..b * mode.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::new(&[b, mode.dim()], out.clone()).unwrap());
        let m = mode.decode_graph(&mut g, v).unwrap();
        let data = g.value(m).data().to_vec();
        for i in 0..b {
            let r = mode.decode(&out[i * mode.dim()..(i + 1) * mode.dim()]).unwrap();
            for e in 0..9 {
                assert_abs_diff_eq!(data[i * 9 + e], r.matrix()[(e / 3, e % 3)], epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn encode_decode_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in RotMode::ALL {
        for _ in 0..200 {
            let r = posebench::geometry::sample_rotation::<f64, _>(&mut rng);
            let back = mode.decode(&mode.encode(&r)).unwrap();
            assert!(back.angle_to(&r) < 1e-9, "{mode}");
        }
        assert_eq!(mode.name().parse::<RotMode>().unwrap(), mode);
        assert_eq!(RotMode::from_code(mode.code()), Some(mode));
    }
    assert!("euler".parse::<RotMode>().is_err());
}

#[test]
fn fresh_network_shapes_and_identity_start() {
    let data = samples(3, 1);
    for mode in RotMode::ALL {
        let net = PatchPnp::<f32>::new(small(mode), 5).unwrap();
        let maps: Vec<_> = data.iter().map(|s| &s.maps).collect();
        let out = net.predict_heads(&maps).unwrap();
        assert_eq!(out.batch, 3);
        assert_eq!(out.rot.len(), 3 * mode.dim());
        assert_eq!(out.site.len(), 9);
        for i in 0..3 {
            let r = mode.decode(&out.rot[i * mode.dim()..(i + 1) * mode.dim()]).unwrap();
            assert!(r.angle_to(&RotationMatrix::identity()) < 0.1, "{mode}");
        }
    }
}

#[test]
fn region_channels_change_the_input() {
    let data = samples(1, 2);
    let cfg = NetConfig { sra_regions: 8, ..small(RotMode::AlloRot6d) };
    let x = posebench::patch_pnp::assemble_input::<f32>(&[&data[0].maps], 8).unwrap();
    assert_eq!(x.shape(), &[1, 13, 64, 64]);
    let np = 64 * 64;
    for px in 0..np {
        let hot: f32 = (5..13).map(|c| x.data()[c * np + px]).sum();
        assert_eq!(hot, if data[0].maps.mask[px] != 0 { 1.0 } else { 0.0 });
    }
    assert!(PatchPnp::<f32>::new(cfg, 0).unwrap().predict_heads(&[&data[0].maps]).is_ok());
    assert!(posebench::patch_pnp::assemble_input::<f32>(&[&data[0].maps], 4).is_err());
}

#[test]
fn outputs_do_not_depend_on_batch_order() {
    let data = samples(4, 3);
    let net = PatchPnp::<f64>::new(small(RotMode::AlloQuat), 9).unwrap();
    let fwd: Vec<_> = data.iter().map(|s| &s.maps).collect();
    let rev: Vec<_> = fwd.iter().rev().copied().collect();
    let a = net.predict_heads(&fwd).unwrap();
    let b = net.predict_heads(&rev).unwrap();
    for i in 0..4 {
        let j = 3 - i;
        for c in 0..3 {
            assert_abs_diff_eq!(a.site[3 * i + c], b.site[3 * j + c], epsilon = 1e-12);
        }
        for c in 0..4 {
            assert_abs_diff_eq!(a.rot[4 * i + c], b.rot[4 * j + c], epsilon = 1e-12);
        }
    }
}

#[test]
fn exact_heads_decode_to_ground_truth() {
    let data = samples(6, 4);
    for mode in RotMode::ALL {
        let tg: Vec<_> = data.iter().map(target).collect();
        let (rot, site) = exact_heads(mode, &tg);
        for (i, t) in tg.iter().enumerate() {
            let d = mode.dim();
            let s = [site.data()[3 * i], site.data()[3 * i + 1], site.data()[3 * i + 2]];
            let p = decode_pose(&rot.data()[i * d..(i + 1) * d], s, mode, &t.crop, ZOOM_SIZE, &t.k).unwrap();
            assert!(p.rot.angle_to(&t.pose.rot) < 1e-9);
            assert!((p.t - t.pose.t).norm() < 1e-9);
        }
    }
}

#[test]
fn loss_vanishes_at_ground_truth() {
    let data = samples(4, 5);
    let tg: Vec<_> = data.iter().map(target).collect();
    for rot_mode in RotMode::ALL {
        for loss_mode in LossMode::ALL {
            for symmetric in [false, true] {
                let mut cfg = LossConfig::new(rot_mode, loss_mode, sphere_model_points());
                if symmetric {
                    cfg.symmetry_aware = true;
                    cfg.symmetry_set = vec![RotationMatrix::identity(), RotationMatrix::rot_z(std::f64::consts::PI)];
                }
                let (rot, site) = exact_heads(rot_mode, &tg);
                let (total, ..) = eval_loss(&cfg, &tg, rot, site);
                assert!(total.abs() < 1e-7, "{loss_mode}/{rot_mode}: {total}");
            }
        }
    }
}

#[test]
fn half_turn_about_z_costs_two() {
    // Over the unit sphere, E|x| = E|y| = 1/2, and a half turn about z moves
    // each point by 2|x| + 2|y| in L1.
    let pts = sphere_model_points();
    let half = RotationMatrix::rot_z(std::f64::consts::PI);
    let l = loss_rot(&half, &RotationMatrix::identity(), &pts);
    assert_abs_diff_eq!(l, 2.0, epsilon = 1e-3);

    let data = samples(1, 6);
    let tg = vec![target(&data[0])];
    let cfg = LossConfig::new(RotMode::EgoRot6d, LossMode::DisentangledSite, pts.clone());
    let gt = tg[0].pose.rot;
    let mut rot = RotMode::EgoRot6d.encode(&half.compose(&gt));
    let (_, site) = exact_heads(RotMode::EgoRot6d, &tg);
    let (total, r, c, z) = eval_loss(&cfg, &tg, Tensor::new(&[1, 6], rot.clone()).unwrap(), site.clone());
    assert_abs_diff_eq!(total, 2.0, epsilon = 1e-3);
    assert_abs_diff_eq!(r, total, epsilon = 1e-12);
    assert_abs_diff_eq!(c + z, 0.0, epsilon = 1e-9);

    rot = RotMode::EgoRot6d.encode(&gt);
    let mut shifted = site.data().to_vec();
    shifted[2] += 0.5;
    let (total, _, _, z) =
        eval_loss(&cfg, &tg, Tensor::new(&[1, 6], rot).unwrap(), Tensor::new(&[1, 3], shifted).unwrap());
    assert_abs_diff_eq!(total, 0.5, epsilon = 1e-9);
    assert_abs_diff_eq!(z, 0.5, epsilon = 1e-9);
}

#[test]
fn symmetric_rotation_loss() {
    let pts = sphere_model_points();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = RotationMatrix::rot_z(std::f64::consts::PI);
    let set = vec![RotationMatrix::identity(), s];
    for _ in 0..50 {
        let gt = posebench::geometry::sample_rotation::<f64, _>(&mut rng);
        let hat = posebench::geometry::sample_rotation::<f64, _>(&mut rng);
        let plain = loss_rot(&hat, &gt, &pts);
        let sym = loss_rot_sym(&hat, &gt, &set, &pts);
        assert!(sym <= plain + 1e-12);
        assert_abs_diff_eq!(loss_rot_sym(&gt.compose(&s), &gt, &set, &pts), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(loss_rot_sym(&hat, &gt, &set[..1], &pts), plain, epsilon = 1e-12);
    }
}

#[test]
fn loss_config_requires_identity_symmetry() {
    let mut cfg = LossConfig::new(RotMode::AlloRot6d, LossMode::Angular, vec![Vector3::x()]);
    cfg.symmetry_set = vec![RotationMatrix::rot_z(1.0)];
    assert!(cfg.validate().is_err());
    assert!("pm_disentangled_Rt".parse::<LossMode>().is_ok());
    assert!("pm".parse::<LossMode>().is_err());
}

#[test]
fn mean_site_matches_encoding() {
    let data = samples(5, 9);
    let m = mean_site(&data, ZOOM_SIZE).unwrap();
    let dz: f64 =
        data.iter().map(|s| encode_site(&s.pose.t, &s.crop(), ZOOM_SIZE, &s.k).unwrap().dz).sum::<f64>() / 5.0;
    assert_abs_diff_eq!(m[2], dz, epsilon = 1e-12);
    // Depth scales with the crop, so the normalized depth barely moves.
    assert!((m[2] - 9.4).abs() < 0.5, "{m:?}");
}

fn run(seed: u64, steps: u64) -> (Vec<f64>, Vec<f32>) {
    let data = samples(6, 10);
    let mut net = PatchPnp::<f32>::new(small(RotMode::AlloRot6d), seed).unwrap();
    let cfg =
        TrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, seed, max_steps: Some(steps), ..TrainConfig::default() };
    let mut state = cfg.optimizer(&net.params, data.len());
    let loss = LossConfig::new(RotMode::AlloRot6d, LossMode::DisentangledSite, sphere_model_points());
    let mut seen = 0;
    let report = train(&mut net, &mut state, &data, &data[..2], &[], &cfg, &loss, |_| seen += 1).unwrap();
    assert_eq!(seen as usize, report.steps.len());
    let params = net.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    (report.steps.iter().map(|s| s.loss_pose).collect(), params)
}

#[test]
fn training_is_reproducible() {
    let a = run(1, 3);
    let b = run(1, 3);
    assert_eq!(a.0.len(), 3);
    assert_eq!(a, b);
    assert_ne!(a.1, run(2, 3).1);
}

#[test]
fn training_rejects_mismatched_heads() {
    let data = samples(2, 11);
    let mut net = PatchPnp::<f32>::new(small(RotMode::AlloQuat), 0).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let mut state = cfg.optimizer(&net.params, data.len());
    let loss = LossConfig::new(RotMode::AlloRot6d, LossMode::DisentangledSite, sphere_model_points());
    assert!(train(&mut net, &mut state, &data, &[], &[], &cfg, &loss, |_| {}).is_err());
}

#[test]
fn predict_pose_uses_translation_for_allocentric_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pose = sample_pose(&mut rng);
    let k = posebench::synth::benchmark_camera();
    let crop = sphere_bbox(&pose.t, 1.0, &k).unwrap().zoomed();
    let data = samples(1, 12);
    let net = PatchPnp::<f64>::new(small(RotMode::AlloRot6d), 1).unwrap();
    let p = predict_pose(&net, &data[0].maps, &crop, ZOOM_SIZE, &k).unwrap();
    let heads = net.predict_heads(&[&data[0].maps]).unwrap();
    let allo = RotMode::AlloRot6d.decode(&heads.rot).unwrap();
    let back = ego_to_allo(&p.rot, &p.t).unwrap();
    assert!(back.angle_to(&allo) < 1e-9);
}

#[test]
fn interrupted_training_resumes_exactly() {
    let data = samples(6, 13);
    let loss = LossConfig::new(RotMode::AlloRot6d, LossMode::PointMatching, sphere_model_points());
    let cfg = TrainConfig { epochs: 3, batch_size: 4, lr: 1e-3, seed: 4, ..TrainConfig::default() };

    let mut straight = PatchPnp::<f32>::new(small(RotMode::AlloRot6d), 0).unwrap();
    let mut s1 = cfg.optimizer(&straight.params, data.len());
    let full = train(&mut straight, &mut s1, &data, &[], &[], &cfg, &loss, |_| {}).unwrap();
    assert_eq!(full.steps.len(), 6);

    let mut resumed = PatchPnp::<f32>::new(small(RotMode::AlloRot6d), 0).unwrap();
    let mut s2 = cfg.optimizer(&resumed.params, data.len());
    let first = TrainConfig { max_steps: Some(3), ..cfg.clone() };
    let a = train(&mut resumed, &mut s2, &data, &[], &[], &first, &loss, |_| {}).unwrap();
    let b = train(&mut resumed, &mut s2, &data, &[], &[], &cfg, &loss, |_| {}).unwrap();
    let steps: Vec<u64> = a.steps.iter().chain(&b.steps).map(|s| s.step).collect();
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
    assert_eq!(a.steps.iter().chain(&b.steps).copied().collect::<Vec<_>>(), full.steps);
    assert_eq!(resumed.params, straight.params);
}

#[test]
fn rotation_loss_is_frame_consistent() {
    let pts = sphere_model_points();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let hat = posebench::geometry::sample_rotation::<f64, _>(&mut rng);
        let gt = posebench::geometry::sample_rotation::<f64, _>(&mut rng);
        let f = posebench::geometry::sample_rotation::<f64, _>(&mut rng);
        let moved: Vec<Vector3<f64>> = pts.iter().map(|x| f.transpose().apply(x)).collect();
        let a = loss_rot(&hat, &gt, &pts);
        let b = loss_rot(&hat.compose(&f), &gt.compose(&f), &moved);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn single_sample_loss_decreases_over_50_step_windows() {
    let data = generate_dataset(&DatasetSpec::train(1, 0)).unwrap();
    let mut net = PatchPnp::<f32>::new(NetConfig::default(), 0).unwrap();
    let cfg = TrainConfig { epochs: 500, batch_size: 1, augment: false, ..TrainConfig::default() };
    let mut state = cfg.optimizer(&net.params, 1);
    let loss = LossConfig::new(RotMode::AlloRot6d, LossMode::DisentangledSite, sphere_model_points());
    let mut curve = Vec::new();
    train(&mut net, &mut state, &data, &[], &[], &cfg, &loss, |s| curve.push(s.loss_pose)).unwrap();
    let windows: Vec<f64> = curve.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    assert!(*curve.last().unwrap() < 1e-3);
}
