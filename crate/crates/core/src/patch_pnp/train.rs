use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::loss::{loss_pose, LossConfig, PoseTarget};
use super::net::{decode_pose, PatchPnp};
use crate::error::{Error, Result};
use crate::geometry::{dynamic_zoom_in, encode_site, BBox};
use crate::metrics::relative_add;
use crate::nn::{opt_step, Graph, LayerParams, OptimState, ANNEAL_POINT};
use crate::scalar::Real;
use crate::synth::{
    corrupt_maps, label_regions, render_sphere_maps, sphere_model_points, stream_rng, GeoMaps, NoiseSpec, SphereSample,
    TRAIN_OUTLIER_MAX, TRAIN_SIGMA_MAX,
};

/// Stream offset separating augmentation draws from the shuffling streams.
const AUGMENT_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub anneal_point: f64,
    pub seed: u64,
    /// Re-render every sample with a jittered crop and fresh corruption.
    pub augment: bool,
    pub sigma_max: f64,
    pub outlier_max: f64,
    pub zoom_size: f64,
    /// Stops after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 24,
            lr: 1e-4,
            anneal_point: ANNEAL_POINT,
            seed: 0,
            augment: true,
            sigma_max: TRAIN_SIGMA_MAX,
            outlier_max: TRAIN_OUTLIER_MAX,
            zoom_size: super::loss::ZOOM_SIZE,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.anneal_point) {
            return bad("anneal point must lie in [0, 1]");
        }
        if !(self.sigma_max >= 0.0 && (0.0..=1.0).contains(&self.outlier_max)) {
            return bad("noise bounds out of range");
        }
        if !(self.zoom_size > 0.0) {
            return bad("zoom size must be positive");
        }
        Ok(())
    }

    /// Optimizer steps in a full run over `n` samples.
    pub fn total_steps(&self, n: usize) -> u64 {
        let per_epoch = n.div_ceil(self.batch_size) as u64;
        let total = per_epoch * self.epochs as u64;
        self.max_steps.map_or(total, |m| m.min(total))
    }

    /// Fresh Adam state scheduled over a full run on `n` samples.
    pub fn optimizer<T: Real>(&self, params: &LayerParams<T>, n: usize) -> OptimState<T> {
        let mut s = OptimState::new(params, self.lr, self.total_steps(n));
        s.anneal_point = self.anneal_point;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss_pose: f64,
    pub loss_rot: f64,
    pub loss_center: f64,
    pub loss_z: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean relative ADD on the held-out samples, when any were given.
    pub heldout_rel_add: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Network input and target for one training draw.
pub struct Prepared {
    pub maps: GeoMaps,
    pub target: PoseTarget,
}

/// Builds the training view of `sample`: either the stored maps or a fresh
/// rendering over a jittered crop with newly drawn corruption.
pub fn prepare_sample<R: Rng>(
    sample: &SphereSample,
    cfg: &TrainConfig,
    centers: &[Vector3<f64>],
    rng: &mut R,
) -> Result<Prepared> {
    if !cfg.augment {
        let target = PoseTarget { pose: sample.pose, crop: sample.crop(), k: sample.k };
        return Ok(Prepared { maps: sample.maps.clone(), target });
    }
    let crop = dynamic_zoom_in(&sample.bbox, rng);
    let mut maps = render_sphere_maps(&sample.pose, &sample.k, &crop, sample.maps.size)?;
    if !centers.is_empty() {
        label_regions(&mut maps, centers);
    }
    let noise = NoiseSpec {
        sigma: rng.random::<f64>() * cfg.sigma_max,
        outlier_ratio: rng.random::<f64>() * cfg.outlier_max,
        seed: rng.next_u64(),
    };
    let maps = corrupt_maps(&maps, &noise)?;
    Ok(Prepared { maps, target: PoseTarget { pose: sample.pose, crop, k: sample.k } })
}

/// Mean scale-invariant translation of the stored crops, used to start the
/// translation head at the target average.
pub fn mean_site(data: &[SphereSample], zoom_size: f64) -> Result<[f64; 3]> {
    let mut acc = [0.0; 3];
    for s in data {
        let e = encode_site(&s.pose.t, &s.crop(), zoom_size, &s.k)?;
        acc[0] += e.dx;
        acc[1] += e.dy;
        acc[2] += e.dz;
    }
    let n = data.len().max(1) as f64;
    Ok(acc.map(|v| v / n))
}

/// Trains `net` with Adam and the cosine schedule in `state`.
///
/// Samples are shuffled every epoch from a seeded stream and every random
/// draw comes from a per-sample stream, so a run is reproducible bit for bit
/// at any thread count. A state restored mid-run resumes at the batch it
/// stopped before, so an interrupted run matches an uninterrupted one. `on_step`
/// sees every step log as it is produced. A fresh optimizer state (step 0)
/// also moves the translation head bias to the mean training target.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Real>(
    net: &mut PatchPnp<T>,
    state: &mut OptimState<T>,
    data: &[SphereSample],
    heldout: &[SphereSample],
    centers: &[Vector3<f64>],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    state.check(&net.params)?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if loss_cfg.rot_mode != net.cfg.rot_mode {
        return Err(Error::InvalidConfig(format!(
            "loss expects {} outputs but the network has {}",
            loss_cfg.rot_mode, net.cfg.rot_mode
        )));
    }
    if state.step == 0 {
        net.set_translation_bias(mean_site(data, cfg.zoom_size)?);
    }
    let total = cfg.total_steps(data.len());
    let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        if (epoch as u64 + 1) * per_epoch <= state.step {
            continue;
        }
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch as u64 * per_epoch + b as u64;
            if step < state.step {
                continue;
            }
            if step >= total {
                break 'epochs;
            }
            let prepared = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = stream_rng(cfg.seed, AUGMENT_STREAM + step * cfg.batch_size as u64 + j as u64);
                    prepare_sample(&data[i], cfg, centers, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let maps: Vec<&GeoMaps> = prepared.iter().map(|p| &p.maps).collect();
            let targets: Vec<PoseTarget> = prepared.iter().map(|p| p.target).collect();

            let mut g = Graph::new();
            let x = g.input(super::net::assemble_input(&maps, net.cfg.sra_regions)?);
            let (rot, site) = net.forward(&mut g, x, true)?;
            let terms = loss_pose(&mut g, rot, site, &targets, cfg.zoom_size, loss_cfg)?;
            let loss = g.value(terms.total).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let grads = g.backward(terms.total)?;
            g.accumulate(&grads, &mut net.params);
            drop(g);
            let lr = opt_step(&mut net.params, state);
            let log = StepLog {
                step,
                epoch,
                loss_pose: loss,
                loss_rot: terms.rot,
                loss_center: terms.center,
                loss_z: terms.z,
                lr,
            };
            on_step(&log);
            report.steps.push(log);
            epoch_loss += loss;
            epoch_steps += 1;
        }
        let heldout_rel_add = if heldout.is_empty() {
            None
        } else {
            let errs = evaluate_rel_add(net, heldout, cfg.zoom_size, 32)?;
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        };
        let mean_loss = epoch_loss / epoch_steps.max(1) as f64;
        log::info!(
            "epoch {} step {} loss {:.5} held-out rel ADD {}",
            epoch + 1,
            state.step,
            mean_loss,
            heldout_rel_add.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        report.epochs.push(EpochLog { epoch, mean_loss, heldout_rel_add });
    }
    Ok(report)
}

/// Predicted poses for `samples`, evaluated on their stored maps and crops in batches.
pub fn predict_samples<T: Real>(
    net: &PatchPnp<T>,
    samples: &[SphereSample],
    maps: &[&GeoMaps],
    zoom_size: f64,
    batch: usize,
) -> Result<Vec<crate::geometry::Pose<f64>>> {
    if samples.len() != maps.len() {
        return Err(Error::ShapeMismatch("one map per sample is required".into()));
    }
    let dim = net.cfg.rot_mode.dim();
    let mut out = Vec::with_capacity(samples.len());
    for (chunk_s, chunk_m) in samples.chunks(batch.max(1)).zip(maps.chunks(batch.max(1))) {
        let heads = net.predict_heads(chunk_m)?;
        for (i, s) in chunk_s.iter().enumerate() {
            let crop: BBox<f64> = s.crop();
            let site = [heads.site[3 * i], heads.site[3 * i + 1], heads.site[3 * i + 2]];
            out.push(decode_pose(&heads.rot[i * dim..(i + 1) * dim], site, net.cfg.rot_mode, &crop, zoom_size, &s.k)?);
        }
    }
    Ok(out)
}

/// Relative ADD of the network on the stored maps of `samples`.
pub fn evaluate_rel_add<T: Real>(
    net: &PatchPnp<T>,
    samples: &[SphereSample],
    zoom_size: f64,
    batch: usize,
) -> Result<Vec<f64>> {
    let maps: Vec<&GeoMaps> = samples.iter().map(|s| &s.maps).collect();
    let poses = predict_samples(net, samples, &maps, zoom_size, batch)?;
    let pts = sphere_model_points();
    Ok(poses.iter().zip(samples).map(|(p, s)| relative_add(p, &s.pose, &pts, s.diameter)).collect())
}
