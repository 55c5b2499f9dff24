use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use super::net::RotMode;
use crate::error::{Error, Result};
use crate::geometry::{ego_to_allo, encode_site, view_rotation, BBox, CameraIntrinsics, Pose, RotationMatrix};
use crate::nn::{Graph, SiteConsts, Tensor, Var};
use crate::scalar::Real;
use crate::synth::GeoMaps;

/// Side of the zoomed-in patch in the translation encoding, in pixels.
pub const ZOOM_SIZE: f64 = 256.0;

/// How the pose loss combines rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossMode {
    /// Point-matching rotation loss plus L1 on the scale-invariant translation.
    DisentangledSite,
    /// Point matching on the full transformed model.
    PointMatching,
    /// Point matching once with the GT translation and once with the GT rotation.
    PmDisentangledRt,
    /// As above, with the translation further split into its center and depth parts.
    PmDisentangledRxyz,
    /// Geodesic rotation angle plus L1 on the scale-invariant translation.
    Angular,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::DisentangledSite,
        LossMode::PointMatching,
        LossMode::PmDisentangledRt,
        LossMode::PmDisentangledRxyz,
        LossMode::Angular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::DisentangledSite => "disentangled_site",
            LossMode::PointMatching => "point_matching",
            LossMode::PmDisentangledRt => "pm_disentangled_Rt",
            LossMode::PmDisentangledRxyz => "pm_disentangled_Rxyz",
            LossMode::Angular => "angular",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub rot_mode: RotMode,
    pub loss_mode: LossMode,
    pub symmetry_aware: bool,
    pub model_points: Vec<Vector3<f64>>,
    /// Rotations mapping the object onto itself; must contain the identity.
    pub symmetry_set: Vec<RotationMatrix<f64>>,
}

impl LossConfig {
    pub fn new(rot_mode: RotMode, loss_mode: LossMode, model_points: Vec<Vector3<f64>>) -> Self {
        Self {
            rot_mode,
            loss_mode,
            symmetry_aware: false,
            model_points,
            symmetry_set: vec![RotationMatrix::identity()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_points.is_empty() {
            return Err(Error::InvalidConfig("loss needs at least one model point".into()));
        }
        let has_identity = self.symmetry_set.iter().any(|s| (s.matrix() - Matrix3::identity()).abs().max() < 1e-9);
        if !has_identity {
            return Err(Error::InvalidConfig("symmetry set must contain the identity".into()));
        }
        Ok(())
    }

    fn symmetries(&self) -> &[RotationMatrix<f64>] {
        if self.symmetry_aware {
            &self.symmetry_set
        } else {
            &self.symmetry_set[..1.min(self.symmetry_set.len())]
        }
    }
}

/// Ground truth of one training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTarget {
    pub pose: Pose<f64>,
    /// Crop the network input was sampled from.
    pub crop: BBox<f64>,
    pub k: CameraIntrinsics<f64>,
}

/// Loss value on the tape plus batch means of its parts for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub rot: f64,
    pub center: f64,
    pub z: f64,
}

/// Mean over `points` of `‖R̂x − R̄x‖₁`.
pub fn loss_rot(r_hat: &RotationMatrix<f64>, r_bar: &RotationMatrix<f64>, points: &[Vector3<f64>]) -> f64 {
    points.iter().map(|x| (r_hat.apply(x) - r_bar.apply(x)).abs().sum()).sum::<f64>() / points.len() as f64
}

/// Smallest [`loss_rot`] over the symmetric ground truths `R̄·S`.
pub fn loss_rot_sym(
    r_hat: &RotationMatrix<f64>,
    r_bar: &RotationMatrix<f64>,
    symmetry_set: &[RotationMatrix<f64>],
    points: &[Vector3<f64>],
) -> f64 {
    symmetry_set.iter().map(|s| loss_rot(r_hat, &r_bar.compose(s), points)).fold(f64::INFINITY, f64::min)
}

fn matrices<T: Real>(ms: &[Matrix3<f64>]) -> Tensor<T> {
    let data = ms.iter().flat_map(|m| (0..9).map(move |i| T::lit(m[(i / 3, i % 3)]))).collect();
    Tensor::new(&[ms.len(), 3, 3], data).expect("matrix batch")
}

fn rows<T: Real>(vs: &[Vec<f64>], width: usize) -> Tensor<T> {
    let data = vs.iter().flat_map(|v| v.iter().map(|&x| T::lit(x))).collect();
    Tensor::new(&[vs.len(), width], data).expect("row batch")
}

/// Constant part of the pose loss for one batch.
struct Prepared<T: Real> {
    b: usize,
    m: usize,
    points: Var,
    /// Ground-truth rotation in the frame the network predicts.
    frame_gt: Vec<Matrix3<f64>>,
    ego_gt: Vec<Matrix3<f64>>,
    view: Option<Var>,
    site_gt: Vec<[f64; 3]>,
    consts: Vec<SiteConsts<T>>,
    t_gt: Vec<Vector3<f64>>,
}

fn prepare<T: Real>(g: &mut Graph<T>, targets: &[PoseTarget], zoom_size: f64, cfg: &LossConfig) -> Result<Prepared<T>> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::ShapeMismatch("empty target batch".into()));
    }
    let m = cfg.model_points.len();
    let pts = Tensor::from_fn(&[3, m], |i| T::lit(cfg.model_points[i % m][i / m]));
    let points = g.input(pts);
    let mut frame_gt = Vec::new();
    let mut ego_gt = Vec::new();
    let mut views = Vec::new();
    let mut site_gt = Vec::new();
    let mut consts = Vec::new();
    let mut t_gt = Vec::new();
    for tg in targets {
        let t = tg.pose.t;
        let ego = *tg.pose.rot.matrix();
        ego_gt.push(ego);
        frame_gt.push(if cfg.rot_mode.is_allocentric() { *ego_to_allo(&tg.pose.rot, &t)?.matrix() } else { ego });
        views.push(*view_rotation(&t)?.matrix());
        let s = encode_site(&t, &tg.crop, zoom_size, &tg.k)?;
        site_gt.push([s.dx, s.dy, s.dz]);
        let c = |v: f64| T::lit(v);
        consts.push(SiteConsts {
            cx: c(tg.crop.cx),
            cy: c(tg.crop.cy),
            w: c(tg.crop.w),
            h: c(tg.crop.h),
            ratio: c(zoom_size / tg.crop.size()),
            fx: c(tg.k.fx),
            fy: c(tg.k.fy),
            px: c(tg.k.cx),
            py: c(tg.k.cy),
        });
        t_gt.push(t);
    }
    let view = cfg.rot_mode.is_allocentric().then(|| g.input(matrices(&views)));
    Ok(Prepared { b: targets.len(), m, points, frame_gt, ego_gt, view, site_gt, consts, t_gt })
}

/// Per-sample mean L1 distance `[B]` between `pts[B, 3, M]` and a constant point batch.
fn point_l1<T: Real>(g: &mut Graph<T>, pts: Var, target: Tensor<T>, p: &Prepared<T>) -> Result<Var> {
    let target = g.input(target);
    let d = g.sub(pts, target)?;
    let d = g.abs(d);
    let d = g.reshape(d, &[p.b, 3 * p.m])?;
    let d = g.sum_last(d)?;
    Ok(g.scale(d, T::lit(1.0 / p.m as f64)))
}

/// `R x + t` for every model point, `[B, 3, M]`, as constants.
fn transformed(rs: &[Matrix3<f64>], ts: Option<&[Vector3<f64>]>, points: &[Vector3<f64>]) -> Vec<f64> {
    let m = points.len();
    let mut out = vec![0.0; rs.len() * 3 * m];
    for (b, r) in rs.iter().enumerate() {
        for (j, x) in points.iter().enumerate() {
            let mut y = r * x;
            if let Some(ts) = ts {
                y += ts[b];
            }
            for a in 0..3 {
                out[(b * 3 + a) * m + j] = y[a];
            }
        }
    }
    out
}

fn const_points<T: Real>(data: Vec<f64>, p: &Prepared<T>) -> Tensor<T> {
    Tensor::new(&[p.b, 3, p.m], data.into_iter().map(T::lit).collect()).expect("point batch")
}

/// Rotation-only point matching `[B]`, minimized over the symmetric ground truths.
fn rot_term<T: Real>(g: &mut Graph<T>, r_hat: Var, p: &Prepared<T>, cfg: &LossConfig) -> Result<Var> {
    let pred = g.matmul(r_hat, p.points)?;
    let mut parts = Vec::new();
    for s in cfg.symmetries() {
        let gt: Vec<Matrix3<f64>> = p.frame_gt.iter().map(|r| r * s.matrix()).collect();
        let target = const_points(transformed(&gt, None, &cfg.model_points), p);
        parts.push(point_l1(g, pred, target, p)?);
    }
    g.min_of(&parts)
}

/// Geodesic angle `[B]` to the closest symmetric ground truth.
fn angular_term<T: Real>(g: &mut Graph<T>, r_hat: Var, p: &Prepared<T>, cfg: &LossConfig) -> Result<Var> {
    let mut parts = Vec::new();
    for s in cfg.symmetries() {
        let gt: Vec<Matrix3<f64>> = p.frame_gt.iter().map(|r| r * s.matrix()).collect();
        let gt = g.input(matrices(&gt));
        let prod = g.mul(r_hat, gt)?;
        let prod = g.reshape(prod, &[p.b, 9])?;
        let tr = g.sum_last(prod)?;
        let c = g.add_scalar(tr, -T::one());
        let c = g.scale(c, T::lit(0.5));
        parts.push(g.acos_clamped(c));
    }
    g.min_of(&parts)
}

/// Point matching `[B]` of `(R, t)` against the ground-truth pose.
/// `rot` is an egocentric rotation batch, `t` a translation batch.
fn pm_term<T: Real>(g: &mut Graph<T>, rot: Var, t: Var, p: &Prepared<T>, cfg: &LossConfig) -> Result<Var> {
    let pts = g.matmul(rot, p.points)?;
    let pts = g.add_rows(pts, t)?;
    let mut parts = Vec::new();
    for s in cfg.symmetries() {
        let gt: Vec<Matrix3<f64>> = p.ego_gt.iter().map(|r| r * s.matrix()).collect();
        let target = const_points(transformed(&gt, Some(&p.t_gt), &cfg.model_points), p);
        parts.push(point_l1(g, pts, target, p)?);
    }
    g.min_of(&parts)
}

fn mean_of<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    let d = g.value(v).data();
    d.iter().map(|x| x.as_f64()).sum::<f64>() / d.len() as f64
}

/// Pose loss of a batch of head outputs `rot_out[B, dim]`, `site_out[B, 3]`.
pub fn loss_pose<T: Real>(
    g: &mut Graph<T>,
    rot_out: Var,
    site_out: Var,
    targets: &[PoseTarget],
    zoom_size: f64,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let p = prepare(g, targets, zoom_size, cfg)?;
    if g.shape(rot_out) != [p.b, cfg.rot_mode.dim()] || g.shape(site_out) != [p.b, 3] {
        return Err(Error::ShapeMismatch(format!(
            "head outputs {:?} and {:?} for {} targets in {} mode",
            g.shape(rot_out),
            g.shape(site_out),
            p.b,
            cfg.rot_mode
        )));
    }
    let r_hat = cfg.rot_mode.decode_graph(g, rot_out)?;

    let site_gt: Vec<Vec<f64>> = p.site_gt.iter().map(|s| s.to_vec()).collect();
    let site_gt_var = g.input(rows(&site_gt, 3));
    let d = g.sub(site_out, site_gt_var)?;
    let d = g.abs(d);
    let center = g.slice_last(d, 0, 2)?;
    let center = g.sum_last(center)?;
    let z = g.slice_last(d, 2, 1)?;
    let z = g.reshape(z, &[p.b])?;

    let r_ego = match p.view {
        Some(view) => g.matmul(view, r_hat)?,
        None => r_hat,
    };
    let t_gt = g.input(rows(&p.t_gt.iter().map(|t| t.as_slice().to_vec()).collect::<Vec<_>>(), 3));
    let r_gt = g.input(matrices(&p.ego_gt));

    let (per_sample, rot_diag) = match cfg.loss_mode {
        LossMode::DisentangledSite => {
            let lr = rot_term(g, r_hat, &p, cfg)?;
            let s = g.add(lr, center)?;
            (g.add(s, z)?, lr)
        }
        LossMode::Angular => {
            let la = angular_term(g, r_hat, &p, cfg)?;
            let s = g.add(la, center)?;
            (g.add(s, z)?, la)
        }
        LossMode::PointMatching => {
            let t_hat = g.site_decode(site_out, &p.consts)?;
            let pm = pm_term(g, r_ego, t_hat, &p, cfg)?;
            (pm, pm)
        }
        LossMode::PmDisentangledRt => {
            let t_hat = g.site_decode(site_out, &p.consts)?;
            let pm_r = pm_term(g, r_ego, t_gt, &p, cfg)?;
            let pm_t = pm_term(g, r_gt, t_hat, &p, cfg)?;
            (g.add(pm_r, pm_t)?, pm_r)
        }
        LossMode::PmDisentangledRxyz => {
            let xy_hat = g.slice_last(site_out, 0, 2)?;
            let z_hat = g.slice_last(site_out, 2, 1)?;
            let xy_gt = g.slice_last(site_gt_var, 0, 2)?;
            let z_gt = g.slice_last(site_gt_var, 2, 1)?;
            let s_xy = g.concat_last(&[xy_hat, z_gt])?;
            let s_z = g.concat_last(&[xy_gt, z_hat])?;
            let t_xy = g.site_decode(s_xy, &p.consts)?;
            let t_z = g.site_decode(s_z, &p.consts)?;
            let pm_r = pm_term(g, r_ego, t_gt, &p, cfg)?;
            let pm_xy = pm_term(g, r_gt, t_xy, &p, cfg)?;
            let pm_z = pm_term(g, r_gt, t_z, &p, cfg)?;
            let s = g.add(pm_r, pm_xy)?;
            (g.add(s, pm_z)?, pm_r)
        }
    };
    let total = g.mean(per_sample);
    Ok(LossTerms { total, rot: mean_of(g, rot_diag), center: mean_of(g, center), z: mean_of(g, z) })
}

/// Dense map predictions for the geometric loss.
#[derive(Debug, Clone, Copy)]
pub struct MapPrediction {
    /// `[B, 3, S, S]` normalized object coordinates.
    pub xyz: Var,
    /// `[B, 1, S, S]` visibility.
    pub vis: Var,
    /// `[B, R, S, S]` region logits.
    pub sra: Var,
}

/// Geometric loss: masked L1 on object coordinates, L1 on the visibility map
/// and cross-entropy on the region logits over visible pixels.
pub fn loss_geom<T: Real>(g: &mut Graph<T>, pred: &MapPrediction, gt: &[&GeoMaps]) -> Result<Var> {
    let first = gt.first().ok_or_else(|| Error::ShapeMismatch("empty map batch".into()))?;
    let (b, s) = (gt.len(), first.size);
    let np = s * s;
    let r = g.shape(pred.sra).get(1).copied().unwrap_or(0);
    if g.shape(pred.xyz) != [b, 3, s, s] || g.shape(pred.vis) != [b, 1, s, s] || g.shape(pred.sra) != [b, r, s, s] {
        return Err(Error::ShapeMismatch("map predictions do not match the ground-truth batch".into()));
    }
    let mut xyz = vec![T::zero(); b * 3 * np];
    let mut xyz_mask = vec![false; b * 3 * np];
    let mut vis = vec![T::zero(); b * np];
    let mut labels = vec![0usize; b * np];
    let mut fg = vec![false; b * np];
    for (i, m) in gt.iter().enumerate() {
        if m.size != s {
            return Err(Error::ShapeMismatch("maps of different sizes in one batch".into()));
        }
        for px in 0..np {
            let on = m.mask[px] != 0;
            vis[i * np + px] = if on { T::one() } else { T::zero() };
            fg[i * np + px] = on;
            if on {
                labels[i * np + px] = (m.regions[px] as usize).saturating_sub(1).min(r.saturating_sub(1));
            }
            for a in 0..3 {
                xyz[(i * 3 + a) * np + px] = T::lit(m.coords3d[3 * px + a] as f64);
                xyz_mask[(i * 3 + a) * np + px] = on;
            }
        }
    }
    let xyz_gt = g.input(Tensor::new(&[b, 3, s, s], xyz)?);
    let vis_gt = g.input(Tensor::new(&[b, 1, s, s], vis)?);
    let l_xyz = g.masked_l1(pred.xyz, xyz_gt, &xyz_mask)?;
    let l_vis = g.masked_l1(pred.vis, vis_gt, &vec![true; b * np])?;
    let l_sra = g.softmax_ce(pred.sra, &labels, &fg)?;
    let s = g.add(l_xyz, l_vis)?;
    g.add(s, l_sra)
}
