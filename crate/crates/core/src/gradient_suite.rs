//! Finite-difference checks of every differentiable op and every pose-loss
//! configuration, in double precision. Shared by the test suite and the CLI
//! self-test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{ego_to_allo, encode_site, RotationMatrix};
use crate::nn::gradcheck::{check_gradients, GradCheckReport};
use crate::nn::{Graph, SiteConsts, Tensor, Var};
use crate::patch_pnp::{loss_pose, LossConfig, LossMode, PoseTarget, RotMode, ZOOM_SIZE};
use crate::synth::{benchmark_camera, fibonacci_sphere, sample_pose, sphere_bbox};

/// Result of one checked function.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

struct Suite {
    probes: usize,
    tol: f64,
    out: Vec<CaseResult>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let report = check_gradients(inputs, f, self.probes, eps, self.tol, 7)?;
        self.out.push(CaseResult { name: name.to_string(), report });
        Ok(())
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Projects any output to a scalar with fixed random weights so every element is exercised.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(v), seed ^ 0xabc);
    let w = g.input(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

/// Every op of the graph, alone or in small compositions.
pub fn op_cases(probes: usize, tol: f64) -> Result<Vec<CaseResult>> {
    let mut s = Suite { probes, tol, out: Vec::new() };
    let a = random(&[4, 5], 1);
    let b = random(&[4, 5], 2);
    let pos = Tensor::from_fn(&[4, 5], |i| 0.5 + i as f64 * 0.1);
    s.check("add", &[a.clone(), b.clone()], 1e-6, |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 1)
    })?;
    s.check("sub", &[a.clone(), b.clone()], 1e-6, |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, 2)
    })?;
    s.check("mul", &[a.clone(), b.clone()], 1e-6, |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 3)
    })?;
    s.check("div", &[a.clone(), pos.clone()], 1e-6, |g, v| {
        let y = g.div(v[0], v[1])?;
        weighted_sum(g, y, 4)
    })?;
    s.check("scale+shift", &[a.clone()], 1e-6, |g, v| {
        let y = g.scale(v[0], -2.5);
        let y = g.add_scalar(y, 0.3);
        weighted_sum(g, y, 5)
    })?;
    s.check("abs", &[a.clone()], 1e-6, |g, v| {
        let y = g.abs(v[0]);
        weighted_sum(g, y, 6)
    })?;
    s.check("sqrt", &[pos.clone()], 1e-6, |g, v| {
        let y = g.sqrt(v[0]);
        weighted_sum(g, y, 7)
    })?;
    s.check("relu", &[a.clone()], 1e-6, |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 8)
    })?;
    s.check("sum+mean", &[a.clone()], 1e-6, |g, v| {
        let y = g.mul(v[0], v[0])?;
        let m = g.mean(y);
        let t = g.sum(y);
        let t = g.scale(t, 0.1);
        g.add(m, t)
    })?;
    s.check("acos", &[Tensor::from_fn(&[7], |i| -0.9 + 0.27 * i as f64)], 1e-6, |g, v| {
        let y = g.acos_clamped(v[0]);
        weighted_sum(g, y, 9)
    })?;

    let a3 = random(&[2, 3, 4], 3);
    let r = random(&[2, 3], 4);
    s.check("sum_last", &[a3.clone()], 1e-6, |g, v| {
        let y = g.sum_last(v[0])?;
        weighted_sum(g, y, 1)
    })?;
    s.check("mul_rows", &[a3.clone(), r.clone()], 1e-6, |g, v| {
        let y = g.mul_rows(v[0], v[1])?;
        weighted_sum(g, y, 2)
    })?;
    s.check("add_rows", &[a3.clone(), r.clone()], 1e-6, |g, v| {
        let y = g.add_rows(v[0], v[1])?;
        weighted_sum(g, y, 3)
    })?;
    s.check("reshape+transpose", &[a3.clone()], 1e-6, |g, v| {
        let y = g.transpose_last2(v[0])?;
        let y = g.reshape(y, &[6, 4])?;
        weighted_sum(g, y, 4)
    })?;
    s.check("slice+concat", &[a3.clone(), r.clone()], 1e-6, |g, v| {
        let x = g.slice_last(v[0], 1, 2)?;
        let r3 = g.reshape(v[1], &[2, 3, 1])?;
        let y = g.concat_last(&[r3, x, r3])?;
        weighted_sum(g, y, 5)
    })?;
    s.check("min_of", &[random(&[10], 5), random(&[10], 6), random(&[10], 7)], 1e-6, |g, v| {
        let y = g.min_of(v)?;
        weighted_sum(g, y, 6)
    })?;

    let m = random(&[3, 2, 4], 11);
    s.check("matmul", &[m.clone(), random(&[3, 4, 5], 12)], 1e-6, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 1)
    })?;
    s.check("matmul shared", &[m, random(&[4, 5], 13)], 1e-6, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 2)
    })?;

    let v3 = random(&[5, 3], 21);
    s.check("normalize", &[v3.clone()], 1e-6, |g, x| {
        let y = g.normalize_last(x[0])?;
        weighted_sum(g, y, 1)
    })?;
    s.check("cross", &[v3.clone(), random(&[5, 3], 23)], 1e-6, |g, x| {
        let y = g.cross_last(x[0], x[1])?;
        weighted_sum(g, y, 2)
    })?;
    s.check("quat_to_mat", &[random(&[5, 4], 22)], 1e-6, |g, x| {
        let y = g.quat_to_mat(x[0])?;
        weighted_sum(g, y, 3)
    })?;
    s.check("exp_quat", &[v3], 1e-6, |g, x| {
        let y = g.exp_quat(x[0])?;
        weighted_sum(g, y, 4)
    })?;
    let tiny = Tensor::from_fn(&[2, 3], |i| 1e-4 * (i as f64 - 2.5));
    s.check("exp_quat near zero", &[tiny], 1e-7, |g, x| {
        let y = g.exp_quat(x[0])?;
        weighted_sum(g, y, 5)
    })?;

    let consts = [
        SiteConsts {
            cx: 300.0,
            cy: 200.0,
            w: 350.0,
            h: 350.0,
            ratio: 256.0 / 350.0,
            fx: 800.0,
            fy: 800.0,
            px: 320.0,
            py: 240.0,
        },
        SiteConsts {
            cx: 100.0,
            cy: 400.0,
            w: 250.0,
            h: 260.0,
            ratio: 256.0 / 260.0,
            fx: 700.0,
            fy: 750.0,
            px: 320.0,
            py: 240.0,
        },
    ];
    let x = Tensor::new(&[2, 3], vec![0.1, -0.05, 8.0, -0.2, 0.15, 9.5])?;
    s.check("site_decode", &[x], 1e-6, |g, v| {
        let y = g.site_decode(v[0], &consts)?;
        weighted_sum(g, y, 1)
    })?;

    s.check("conv2d", &[random(&[2, 3, 6, 6], 31), random(&[4, 3, 3, 3], 32)], 1e-3, |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        weighted_sum(g, y, 1)
    })?;
    s.check("group_norm", &[random(&[2, 4, 3, 3], 33), random(&[4], 34), random(&[4], 35)], 1e-4, |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
        weighted_sum(g, y, 2)
    })?;
    s.check("linear", &[random(&[3, 5], 36), random(&[4, 5], 37), random(&[4], 38)], 1e-6, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        weighted_sum(g, y, 3)
    })?;

    let mask: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
    s.check("masked_l1", &[random(&[2, 3, 4], 41), random(&[2, 3, 4], 42)], 1e-7, |g, v| {
        g.masked_l1(v[0], v[1], &mask)
    })?;
    let labels: Vec<usize> = (0..18).map(|i| i % 4).collect();
    let pix: Vec<bool> = (0..18).map(|i| i % 5 != 0).collect();
    s.check("softmax_ce", &[random(&[2, 4, 3, 3], 43)], 1e-5, |g, v| g.softmax_ce(v[0], &labels, &pix))?;

    let inputs = [
        random(&[2, 2, 8, 8], 51),
        random(&[4, 2, 3, 3], 52),
        random(&[4], 53),
        random(&[4], 54),
        random(&[3, 64], 55),
        random(&[3], 56),
    ];
    s.check("conv-gn-relu-fc", &inputs, 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        let y = g.group_norm(y, v[2], v[3], 2, 1e-5)?;
        let y = g.relu(y);
        let y = g.reshape(y, &[2, 64])?;
        let y = g.linear(y, v[4], v[5])?;
        weighted_sum(g, y, 1)
    })?;
    Ok(s.out)
}

fn targets(b: usize, seed: u64) -> Result<Vec<PoseTarget>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = benchmark_camera();
    (0..b)
        .map(|_| {
            let pose = sample_pose(&mut rng);
            let crop = sphere_bbox(&pose.t, 1.0, &k)?.zoomed();
            Ok(PoseTarget { pose, crop, k })
        })
        .collect()
}

/// Head outputs near the ground truth so decodes stay well conditioned.
fn heads(mode: RotMode, tg: &[PoseTarget], seed: u64) -> Result<[Tensor<f64>; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rot = Vec::new();
    let mut site = Vec::new();
    for t in tg {
        let r = if mode.is_allocentric() { ego_to_allo(&t.pose.rot, &t.pose.t)? } else { t.pose.rot };
        rot.extend(mode.encode(&r).into_iter().map(|v| v + rng.random_range(-0.3..0.3)));
        let s = encode_site(&t.pose.t, &t.crop, ZOOM_SIZE, &t.k)?;
        site.extend([s.dx, s.dy, s.dz].map(|v| v + rng.random_range(-0.2..0.2)));
    }
    Ok([Tensor::new(&[tg.len(), mode.dim()], rot)?, Tensor::new(&[tg.len(), 3], site)?])
}

/// Four-fold symmetry about z, used to exercise the symmetry-aware losses.
pub fn four_fold_z() -> Vec<RotationMatrix<f64>> {
    (0..4).map(|i| RotationMatrix::rot_z(i as f64 * std::f64::consts::FRAC_PI_2)).collect()
}

/// The pose loss for every loss mode (plain and symmetry-aware) and every
/// rotation parameterization, differentiated with respect to the head outputs.
pub fn loss_cases(probes: usize, tol: f64) -> Result<Vec<CaseResult>> {
    let mut s = Suite { probes, tol, out: Vec::new() };
    let mut combos = Vec::new();
    for loss_mode in LossMode::ALL {
        for rot_mode in [RotMode::AlloRot6d, RotMode::EgoRot6d] {
            combos.push((rot_mode, loss_mode, false));
        }
        combos.push((RotMode::AlloRot6d, loss_mode, true));
    }
    for rot_mode in [RotMode::AlloQuat, RotMode::AlloLogQuat, RotMode::AlloAxisAngle] {
        combos.push((rot_mode, LossMode::DisentangledSite, false));
        combos.push((rot_mode, LossMode::PointMatching, false));
    }
    for (i, (rot_mode, loss_mode, symmetric)) in combos.into_iter().enumerate() {
        let seed = 100 + 2 * i as u64;
        let tg = targets(3, seed)?;
        let mut cfg = LossConfig::new(rot_mode, loss_mode, fibonacci_sphere(48));
        if symmetric {
            cfg.symmetry_aware = true;
            cfg.symmetry_set = four_fold_z();
        }
        let name = format!("{loss_mode}/{rot_mode}{}", if symmetric { "/symmetric" } else { "" });
        s.check(&name, &heads(rot_mode, &tg, seed + 1)?, 1e-6, |g, v| {
            Ok(loss_pose(g, v[0], v[1], &tg, ZOOM_SIZE, &cfg)?.total)
        })?;
    }
    Ok(s.out)
}
