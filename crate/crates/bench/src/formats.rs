//! Binary dataset (`GDRS`) and checkpoint (`GDRC`) files. Everything is
//! little-endian without padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use posebench::geometry::{BBox, CameraIntrinsics, Pose, RotationMatrix};
use posebench::nn::{LayerParams, OptimState, Tensor};
use posebench::patch_pnp::{NetConfig, PatchPnp, RotMode};
use posebench::synth::{GeoMaps, SphereSample, MAP_SIZE};

pub const DATASET_MAGIC: &[u8; 4] = b"GDRS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDRC";
pub const FORMAT_VERSION: u32 = 1;

const NP: usize = MAP_SIZE * MAP_SIZE;
/// Bytes per dataset record.
pub const RECORD_BYTES: usize = 9 * 8 + 3 * 8 + 4 * 8 + 4 * 4 + 8 + NP * 3 * 4 + NP * 2 * 4 + NP + NP;

/// Little-endian field reader over a byte slice.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let b = self.take(4 * n)?;
        Some(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn encode_record(s: &SphereSample, out: &mut Vec<u8>) {
    let m = s.pose.rot.matrix();
    for r in 0..3 {
        for c in 0..3 {
            out.extend(m[(r, c)].to_le_bytes());
        }
    }
    for v in s.pose.t.iter() {
        out.extend(v.to_le_bytes());
    }
    for v in [s.k.fx, s.k.fy, s.k.cx, s.k.cy] {
        out.extend(v.to_le_bytes());
    }
    for v in [s.bbox.cx, s.bbox.cy, s.bbox.w, s.bbox.h] {
        out.extend((v as f32).to_le_bytes());
    }
    out.extend(s.diameter.to_le_bytes());
    for v in s.maps.coords3d.iter().chain(&s.maps.coords2d) {
        out.extend(v.to_le_bytes());
    }
    out.extend(&s.maps.mask);
    out.extend(&s.maps.regions);
}

fn decode_record(buf: &[u8]) -> Result<SphereSample, String> {
    let mut c = Cursor { buf, pos: 0 };
    let short = || "truncated record".to_string();
    let mut m = Matrix3::zeros();
    for r in 0..3 {
        for col in 0..3 {
            m[(r, col)] = c.f64().ok_or_else(short)?;
        }
    }
    let rot = RotationMatrix::from_matrix(m, 1e-6).map_err(|e| e.to_string())?;
    let t = Vector3::new(c.f64().ok_or_else(short)?, c.f64().ok_or_else(short)?, c.f64().ok_or_else(short)?);
    let kv: Vec<f64> = (0..4).map(|_| c.f64()).collect::<Option<_>>().ok_or_else(short)?;
    let k = CameraIntrinsics::new(kv[0], kv[1], kv[2], kv[3]).map_err(|e| e.to_string())?;
    let bv: Vec<f64> = (0..4).map(|_| c.f32().map(f64::from)).collect::<Option<_>>().ok_or_else(short)?;
    let bbox = BBox::new(bv[0], bv[1], bv[2], bv[3]).map_err(|e| e.to_string())?;
    let diameter = c.f64().ok_or_else(short)?;
    let maps = GeoMaps {
        size: MAP_SIZE,
        coords3d: c.f32s(NP * 3).ok_or_else(short)?,
        coords2d: c.f32s(NP * 2).ok_or_else(short)?,
        mask: c.take(NP).ok_or_else(short)?.to_vec(),
        regions: c.take(NP).ok_or_else(short)?.to_vec(),
    };
    maps.validate().map_err(|e| e.to_string())?;
    if !(diameter > 0.0) {
        return Err(format!("diameter {diameter} must be positive"));
    }
    Ok(SphereSample { pose: Pose::new(rot, t), k, bbox, maps, diameter })
}

/// Serializes a dataset into `w`.
pub fn write_dataset_to(samples: &[SphereSample], mut w: impl Write) -> std::io::Result<()> {
    let mut head = Vec::with_capacity(16);
    head.extend(DATASET_MAGIC);
    head.extend(FORMAT_VERSION.to_le_bytes());
    head.extend((samples.len() as u64).to_le_bytes());
    w.write_all(&head)?;
    let mut rec = Vec::with_capacity(RECORD_BYTES);
    for s in samples {
        rec.clear();
        encode_record(s, &mut rec);
        w.write_all(&rec)?;
    }
    w.flush()
}

/// Writes a dataset file and returns its SHA-256 as lowercase hex.
pub fn write_dataset(path: &Path, samples: &[SphereSample]) -> CliResult<String> {
    if samples.iter().any(|s| s.maps.size != MAP_SIZE) {
        return Err(CliError::format(path, format!("only {MAP_SIZE}x{MAP_SIZE} maps can be stored")));
    }
    create_parent(path)?;
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_dataset_to(samples, BufWriter::new(f)).map_err(|e| CliError::io(path, e))?;
    file_sha256(path)
}

/// Parses a dataset from `r`. `limit` stops after that many records.
pub fn read_dataset_from(path: &Path, mut r: impl Read, limit: Option<usize>) -> CliResult<Vec<SphereSample>> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| CliError::format(path, "missing header"))?;
    if &head[..4] != DATASET_MAGIC {
        return Err(CliError::format(path, "not a GDRS dataset"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CliError::format(path, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let n = limit.map_or(count, |l| l.min(count));
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; RECORD_BYTES];
    for i in 0..n {
        r.read_exact(&mut buf).map_err(|_| CliError::format(path, format!("truncated at record {i} of {count}")))?;
        out.push(decode_record(&buf).map_err(|m| CliError::format(path, format!("record {i}: {m}")))?);
    }
    if n == count {
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|e| CliError::io(path, e))? != 0 {
            return Err(CliError::format(path, "trailing bytes after the last record"));
        }
    }
    Ok(out)
}

pub fn read_dataset(path: &Path, limit: Option<usize>) -> CliResult<Vec<SphereSample>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_dataset_from(path, BufReader::with_capacity(1 << 20, f), limit)
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e)),
        _ => Ok(()),
    }
}

/// One named tensor of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered named tensors: network parameters, then `meta.*` and `adam.*` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

const META_NET: &str = "meta.net";
const ADAM_STEP: &str = "adam.step";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend((e.name.len() as u32).to_le_bytes());
            out.extend(e.name.as_bytes());
            out.extend((e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend((d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, buf: &[u8]) -> CliResult<Self> {
        let err = |m: &str| CliError::format(path, m.to_string());
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(err("not a GDRC checkpoint"));
        }
        if c.u32() != Some(FORMAT_VERSION) {
            return Err(err("unsupported checkpoint version"));
        }
        let n = c.u32().ok_or_else(|| err("missing entry count"))?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let len = c.u32().ok_or_else(|| err("truncated entry"))? as usize;
            let name = std::str::from_utf8(c.take(len).ok_or_else(|| err("truncated name"))?)
                .map_err(|_| err("name is not UTF-8"))?
                .to_string();
            let rank = c.u32().ok_or_else(|| err("truncated rank"))? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| c.u32().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| err("truncated shape"))?;
            let data = c.f32s(shape.iter().product()).ok_or_else(|| err("truncated tensor data"))?;
            if entries.iter().any(|e: &Entry| e.name == name) {
                return Err(err("duplicate tensor name"));
            }
            entries.push(Entry { name, shape, data });
        }
        if c.pos != buf.len() {
            return Err(err("trailing bytes after the last tensor"));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        create_parent(path)?;
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let buf = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(path, &buf)
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Captures a network and, when given, its optimizer state.
    pub fn capture(net: &PatchPnp<f32>, state: Option<&OptimState<f32>>) -> CliResult<Self> {
        let mut entries: Vec<Entry> = net
            .params
            .iter()
            .map(|(n, t)| Entry { name: n.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        let c = net.cfg;
        let meta = [c.rot_mode.code() as usize, c.sra_regions, c.conv_width, c.hidden, c.map_size];
        entries.push(Entry {
            name: META_NET.into(),
            shape: vec![meta.len()],
            data: meta.iter().map(|&v| v as f32).collect(),
        });
        if let Some(s) = state {
            // f32 holds every integer up to 2^24 exactly.
            if s.step >= 1 << 24 {
                return Err(CliError::Config(format!("step {} cannot be stored in a checkpoint", s.step)));
            }
            entries.push(Entry { name: ADAM_STEP.into(), shape: vec![1], data: vec![s.step as f32] });
            for (((n, t), m), v) in net.params.iter().zip(&s.m).zip(&s.v) {
                entries.push(Entry { name: format!("adam.m.{n}"), shape: t.shape().to_vec(), data: m.clone() });
                entries.push(Entry { name: format!("adam.v.{n}"), shape: t.shape().to_vec(), data: v.clone() });
            }
        }
        Ok(Self { entries })
    }

    pub fn net_config(&self, path: &Path) -> CliResult<NetConfig> {
        let m = self.get(META_NET).ok_or_else(|| CliError::format(path, "missing network metadata"))?;
        if m.data.len() != 5 {
            return Err(CliError::format(path, "malformed network metadata"));
        }
        let v: Vec<usize> = m.data.iter().map(|&x| x as usize).collect();
        let rot_mode =
            RotMode::from_code(v[0] as u32).ok_or_else(|| CliError::format(path, "unknown rotation mode"))?;
        Ok(NetConfig { rot_mode, sra_regions: v[1], conv_width: v[2], hidden: v[3], map_size: v[4] })
    }

    /// Rebuilds the network stored in the checkpoint.
    pub fn network(&self, path: &Path) -> CliResult<PatchPnp<f32>> {
        let cfg = self.net_config(path)?;
        let mut params = LayerParams::new();
        for e in self.entries.iter().filter(|e| !e.name.starts_with("meta.") && !e.name.starts_with("adam.")) {
            params.add(&e.name, Tensor::new(&e.shape, e.data.clone())?);
        }
        PatchPnp::from_params(cfg, params).map_err(|e| CliError::format(path, e.to_string()))
    }

    /// Restores the optimizer moments and step counter, if present.
    pub fn restore_optimizer(&self, path: &Path, net: &PatchPnp<f32>, state: &mut OptimState<f32>) -> CliResult<bool> {
        let Some(step) = self.get(ADAM_STEP) else { return Ok(false) };
        for (i, (n, t)) in net.params.iter().enumerate() {
            let m = self.get(&format!("adam.m.{n}"));
            let v = self.get(&format!("adam.v.{n}"));
            match (m, v) {
                (Some(m), Some(v)) if m.data.len() == t.len() && v.data.len() == t.len() => {
                    state.m[i].clone_from(&m.data);
                    state.v[i].clone_from(&v.data);
                }
                _ => return Err(CliError::format(path, format!("optimizer state for {n} missing or misshapen"))),
            }
        }
        state.step = step.data.first().copied().unwrap_or(0.0) as u64;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use posebench::synth::{generate_dataset, DatasetSpec};

    #[test]
    fn record_size_matches_layout() {
        let s = generate_dataset(&DatasetSpec::train(1, 3)).unwrap();
        let mut buf = Vec::new();
        encode_record(&s[0], &mut buf);
        assert_eq!(buf.len(), RECORD_BYTES);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = Path::new("x.gdrc");
        let ck =
            Checkpoint { entries: vec![Entry { name: "w".into(), shape: vec![2, 2], data: vec![1.0, 2.0, 3.0, 4.0] }] };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(p, &bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(p, &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(p, &extra).is_err());
        assert!(Checkpoint::from_bytes(p, b"GDRS\x01\0\0\0").is_err());
    }
}
