use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    allo_to_ego, axisangle_to_matrix, decode_site, logquat_to_matrix, quat_to_matrix, rot6d_to_matrix, AxisAngle, BBox,
    CameraIntrinsics, LogQuat, Pose, Quaternion, Rot6d, RotationMatrix, SiteTranslation,
};
use crate::nn::{kaiming_uniform, Graph, LayerParams, ParamId, Tensor, Var, GN_EPS, GN_GROUPS};
use crate::scalar::Real;
use crate::synth::{GeoMaps, MAP_SIZE};

/// Rotation output of the network and the frame it lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RotMode {
    AlloRot6d,
    EgoRot6d,
    AlloQuat,
    AlloLogQuat,
    AlloAxisAngle,
}

impl RotMode {
    pub const ALL: [RotMode; 5] =
        [RotMode::AlloRot6d, RotMode::EgoRot6d, RotMode::AlloQuat, RotMode::AlloLogQuat, RotMode::AlloAxisAngle];

    /// Width of the rotation head.
    pub fn dim(self) -> usize {
        match self {
            RotMode::AlloRot6d | RotMode::EgoRot6d => 6,
            RotMode::AlloQuat => 4,
            RotMode::AlloLogQuat | RotMode::AlloAxisAngle => 3,
        }
    }

    pub fn is_allocentric(self) -> bool {
        self != RotMode::EgoRot6d
    }

    pub fn name(self) -> &'static str {
        match self {
            RotMode::AlloRot6d => "allo_rot6d",
            RotMode::EgoRot6d => "ego_rot6d",
            RotMode::AlloQuat => "allo_quat",
            RotMode::AlloLogQuat => "allo_logquat",
            RotMode::AlloAxisAngle => "allo_axisangle",
        }
    }

    /// Stable numeric code used in checkpoints.
    pub fn code(self) -> u32 {
        RotMode::ALL.iter().position(|&m| m == self).expect("listed") as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        RotMode::ALL.get(code as usize).copied()
    }

    /// Head bias that decodes to the identity rotation.
    fn identity_output(self) -> Vec<f64> {
        match self {
            RotMode::AlloRot6d | RotMode::EgoRot6d => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            RotMode::AlloQuat => vec![1.0, 0.0, 0.0, 0.0],
            RotMode::AlloLogQuat | RotMode::AlloAxisAngle => vec![0.0; 3],
        }
    }

    /// Network output encoding `rot` (allocentric or egocentric as the mode requires).
    pub fn encode(self, rot: &RotationMatrix<f64>) -> Vec<f64> {
        use crate::geometry::{matrix_to_axisangle, matrix_to_logquat, matrix_to_quat, matrix_to_rot6d};
        match self {
            RotMode::AlloRot6d | RotMode::EgoRot6d => matrix_to_rot6d(rot).to_array().to_vec(),
            RotMode::AlloQuat => {
                let q = matrix_to_quat(rot);
                vec![q.w, q.x, q.y, q.z]
            }
            RotMode::AlloLogQuat => matrix_to_logquat(rot).v.as_slice().to_vec(),
            RotMode::AlloAxisAngle => matrix_to_axisangle(rot).v.as_slice().to_vec(),
        }
    }

    /// Rotation decoded from one head output.
    pub fn decode(self, out: &[f64]) -> Result<RotationMatrix<f64>> {
        if out.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("{} expects {} values, got {}", self, self.dim(), out.len())));
        }
        let v3 = || Vector3::new(out[0], out[1], out[2]);
        match self {
            RotMode::AlloRot6d | RotMode::EgoRot6d => rot6d_to_matrix(&Rot6d::from_slice(out)),
            RotMode::AlloQuat => quat_to_matrix(&Quaternion::new(out[0], out[1], out[2], out[3])),
            RotMode::AlloLogQuat => Ok(logquat_to_matrix(&LogQuat { v: v3() })),
            RotMode::AlloAxisAngle => Ok(axisangle_to_matrix(&AxisAngle { v: v3() })),
        }
    }

    /// Differentiable decode of a `[B, dim]` head output into `[B, 3, 3]` matrices.
    pub fn decode_graph<T: Real>(self, g: &mut Graph<T>, out: Var) -> Result<Var> {
        let b = g.shape(out)[0];
        match self {
            RotMode::AlloRot6d | RotMode::EgoRot6d => {
                let a1 = g.slice_last(out, 0, 3)?;
                let a2 = g.slice_last(out, 3, 3)?;
                let b1 = g.normalize_last(a1)?;
                let dot = g.mul(b1, a2)?;
                let dot = g.sum_last(dot)?;
                let proj = g.mul_rows(b1, dot)?;
                let r2 = g.sub(a2, proj)?;
                let b2 = g.normalize_last(r2)?;
                let b3 = g.cross_last(b1, b2)?;
                let rows = g.concat_last(&[b1, b2, b3])?;
                let rows = g.reshape(rows, &[b, 3, 3])?;
                g.transpose_last2(rows)
            }
            RotMode::AlloQuat => {
                let q = g.normalize_last(out)?;
                g.quat_to_mat(q)
            }
            RotMode::AlloLogQuat => {
                let q = g.exp_quat(out)?;
                g.quat_to_mat(q)
            }
            RotMode::AlloAxisAngle => {
                let half = g.scale(out, T::lit(0.5));
                let q = g.exp_quat(half)?;
                g.quat_to_mat(q)
            }
        }
    }
}

impl fmt::Display for RotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RotMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown rotation mode '{s}'")))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub rot_mode: RotMode,
    /// Region count fed as one-hot channels, or 0 to leave the region map out.
    pub sra_regions: usize,
    pub conv_width: usize,
    pub hidden: usize,
    pub map_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { rot_mode: RotMode::AlloRot6d, sra_regions: 0, conv_width: 128, hidden: 256, map_size: MAP_SIZE }
    }
}

impl NetConfig {
    pub fn in_channels(&self) -> usize {
        5 + self.sra_regions
    }

    /// Flattened feature length after the three stride-2 convolutions.
    pub fn flat_features(&self) -> usize {
        let s = self.map_size / 8;
        self.conv_width * s * s
    }

    pub fn validate(&self) -> Result<()> {
        if self.map_size == 0 || self.map_size % 8 != 0 {
            return Err(Error::InvalidConfig(format!("map size {} is not a positive multiple of 8", self.map_size)));
        }
        if self.conv_width == 0 || self.conv_width % GN_GROUPS != 0 {
            return Err(Error::InvalidConfig(format!(
                "conv width {} is not a multiple of {GN_GROUPS}",
                self.conv_width
            )));
        }
        if self.hidden == 0 || self.sra_regions > u8::MAX as usize {
            return Err(Error::InvalidConfig("hidden width must be positive and regions at most 255".into()));
        }
        Ok(())
    }
}

struct Layers {
    conv: [(ParamId, ParamId, ParamId); 3],
    fc: [(ParamId, ParamId); 2],
    head_rot: (ParamId, ParamId),
    head_t: (ParamId, ParamId),
}

/// Scale applied to the Kaiming bound of the two output heads, so training
/// starts close to the head biases.
const HEAD_INIT_SCALE: f64 = 0.01;

/// The learnable PnP network: three conv-GN-ReLU blocks, two fully connected
/// layers and parallel rotation and translation heads.
pub struct PatchPnp<T: Real> {
    pub cfg: NetConfig,
    pub params: LayerParams<T>,
    layers: Layers,
}

/// Raw head outputs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `[B, rot_mode.dim()]`, row-major.
    pub rot: Vec<f64>,
    /// `[B, 3]` scale-invariant translations.
    pub site: Vec<f64>,
    pub batch: usize,
}

impl<T: Real> PatchPnp<T> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = LayerParams::new();
        let w = cfg.conv_width;
        let mut cin = cfg.in_channels();
        let mut conv = Vec::new();
        for i in 1..=3 {
            let k = p.add(&format!("conv{i}.weight"), kaiming_uniform(&[w, cin, 3, 3], cin * 9, &mut rng));
            let s = p.add(&format!("gn{i}.weight"), Tensor::full(&[w], T::one()));
            let b = p.add(&format!("gn{i}.bias"), Tensor::zeros(&[w]));
            conv.push((k, s, b));
            cin = w;
        }
        let mut fc = Vec::new();
        let mut fin = cfg.flat_features();
        for i in 1..=2 {
            let wt = p.add(&format!("fc{i}.weight"), kaiming_uniform(&[cfg.hidden, fin], fin, &mut rng));
            let b = p.add(&format!("fc{i}.bias"), Tensor::zeros(&[cfg.hidden]));
            fc.push((wt, b));
            fin = cfg.hidden;
        }
        let mut head = |name: &str, out: usize, bias: Vec<f64>, rng: &mut ChaCha8Rng| {
            let mut wt: Tensor<T> = kaiming_uniform(&[out, cfg.hidden], cfg.hidden, rng);
            wt.data_mut().iter_mut().for_each(|v| *v *= T::lit(HEAD_INIT_SCALE));
            let b = Tensor::new(&[out], bias.into_iter().map(T::lit).collect()).expect("bias length");
            (p.add(&format!("{name}.weight"), wt), p.add(&format!("{name}.bias"), b))
        };
        let head_rot = head("head_rot", cfg.rot_mode.dim(), cfg.rot_mode.identity_output(), &mut rng);
        let head_t = head("head_t", 3, vec![0.0; 3], &mut rng);
        let layers = Layers { conv: [conv[0], conv[1], conv[2]], fc: [fc[0], fc[1]], head_rot, head_t };
        Ok(Self { cfg, params: p, layers })
    }

    /// Rebuilds a network around loaded parameters; names and shapes must match a fresh one.
    pub fn from_params(cfg: NetConfig, params: LayerParams<T>) -> Result<Self> {
        let fresh = Self::new(cfg, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in fresh.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {n2} {:?} does not match {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(Self { cfg, params, layers: fresh.layers })
    }

    fn var(&self, g: &mut Graph<T>, id: ParamId, train: bool) -> Var {
        if train {
            g.param(&self.params, id)
        } else {
            g.input(self.params.get(id).clone())
        }
    }

    /// Runs the network on `input[B, C, S, S]`, returning the rotation and
    /// translation head outputs. With `train` the parameters receive gradients.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, train: bool) -> Result<(Var, Var)> {
        let s = g.shape(input).to_vec();
        let want = [self.cfg.in_channels(), self.cfg.map_size, self.cfg.map_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::ShapeMismatch(format!("network input {s:?}, expected [B, {want:?}]")));
        }
        let b = s[0];
        let mut x = input;
        for &(k, sc, sh) in &self.layers.conv {
            let k = self.var(g, k, train);
            let sc = self.var(g, sc, train);
            let sh = self.var(g, sh, train);
            x = g.conv2d(x, k, 2, 1)?;
            x = g.group_norm(x, sc, sh, GN_GROUPS, T::lit(GN_EPS))?;
            x = g.relu(x);
        }
        x = g.reshape(x, &[b, self.cfg.flat_features()])?;
        for &(w, bias) in &self.layers.fc {
            let w = self.var(g, w, train);
            let bias = self.var(g, bias, train);
            x = g.linear(x, w, bias)?;
            x = g.relu(x);
        }
        let (wr, br) = (self.var(g, self.layers.head_rot.0, train), self.var(g, self.layers.head_rot.1, train));
        let (wt, bt) = (self.var(g, self.layers.head_t.0, train), self.var(g, self.layers.head_t.1, train));
        let rot = g.linear(x, wr, br)?;
        let t = g.linear(x, wt, bt)?;
        Ok((rot, t))
    }

    /// Inference on a batch of maps.
    pub fn predict_heads(&self, maps: &[&GeoMaps]) -> Result<HeadOutput> {
        let input = assemble_input::<T>(maps, self.cfg.sra_regions)?;
        let mut g = Graph::new();
        let x = g.input(input);
        let (rot, t) = self.forward(&mut g, x, false)?;
        Ok(HeadOutput {
            rot: g.value(rot).data().iter().map(|v| v.as_f64()).collect(),
            site: g.value(t).data().iter().map(|v| v.as_f64()).collect(),
            batch: maps.len(),
        })
    }

    /// Sets the translation head bias, e.g. to the mean training target.
    pub fn set_translation_bias(&mut self, bias: [f64; 3]) {
        let b = self.params.get_mut(self.layers.head_t.1);
        b.data_mut().iter_mut().zip(bias).for_each(|(d, v)| *d = T::lit(v));
    }
}

/// Stacks maps into the network input `[B, 5 (+ regions), S, S]`: normalized
/// object coordinates, normalized image coordinates and, when `sra_regions`
/// is positive, one-hot surface regions.
pub fn assemble_input<T: Real>(maps: &[&GeoMaps], sra_regions: usize) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let size = first.size;
    let np = size * size;
    let c = 5 + sra_regions;
    let mut data = vec![T::zero(); maps.len() * c * np];
    for (b, m) in maps.iter().enumerate() {
        if m.size != size {
            return Err(Error::ShapeMismatch("maps of different sizes in one batch".into()));
        }
        let base = b * c * np;
        for px in 0..np {
            for a in 0..3 {
                data[base + a * np + px] = T::lit(m.coords3d[3 * px + a] as f64);
            }
            for a in 0..2 {
                data[base + (3 + a) * np + px] = T::lit(m.coords2d[2 * px + a] as f64);
            }
            let r = m.regions[px] as usize;
            if sra_regions > 0 && r > 0 {
                if r > sra_regions {
                    return Err(Error::ShapeMismatch(format!("region label {r} exceeds {sra_regions}")));
                }
                data[base + (4 + r) * np + px] = T::one();
            }
        }
    }
    Tensor::new(&[maps.len(), c, size, size], data)
}

/// Decodes raw head outputs into an egocentric pose. The translation is
/// decoded first because the allocentric-to-egocentric conversion needs it.
pub fn decode_pose(
    rot_out: &[f64],
    site: [f64; 3],
    rot_mode: RotMode,
    crop: &BBox<f64>,
    zoom_size: f64,
    k: &CameraIntrinsics<f64>,
) -> Result<Pose<f64>> {
    let s = SiteTranslation { dx: site[0], dy: site[1], dz: site[2] };
    let t = decode_site(&s, crop, zoom_size, k)?;
    let r = rot_mode.decode(rot_out)?;
    let rot = if rot_mode.is_allocentric() { allo_to_ego(&r, &t)? } else { r };
    Ok(Pose::new(rot, t))
}

/// Pose of a single sample from a trained network.
pub fn predict_pose<T: Real>(
    net: &PatchPnp<T>,
    maps: &GeoMaps,
    crop: &BBox<f64>,
    zoom_size: f64,
    k: &CameraIntrinsics<f64>,
) -> Result<Pose<f64>> {
    let out = net.predict_heads(&[maps])?;
    decode_pose(&out.rot, [out.site[0], out.site[1], out.site[2]], net.cfg.rot_mode, crop, zoom_size, k)
}
