use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{create_parent, read_dataset, write_dataset, Checkpoint};
use crate::svg::bench_plot;
use posebench::geometry::{Pose, RotationMatrix};
use posebench::metrics::{add_recall, mean, median, ndeg_ncm, relative_add};
use posebench::patch_pnp::{predict_samples, train, LossConfig, PatchPnp, StepLog, ZOOM_SIZE};
use posebench::pnp::{maps_to_correspondences, ransac_pnp};
use posebench::synth::{
    corrupt_maps, generate_sample, region_centers, sphere_model_points, stream_rng, DatasetSpec, GeoMaps, NoiseSpec,
    SphereSample, SPHERE_EXTENTS,
};

/// Network evaluation batch size.
const EVAL_BATCH: usize = 32;
/// Separates the corruption seeds from the RANSAC sampler seeds.
const NOISE_SALT: u64 = 0x6e6f_6973_65;

#[derive(Debug, Clone, PartialEq)]
pub struct GenOutput {
    pub train_sha256: String,
    pub test_sha256: String,
}

/// Generates both splits and writes them to the configured paths.
pub fn cmd_gen(cfg: &RunConfig, seed: u64) -> CliResult<GenOutput> {
    let centers = region_centers(cfg.n_regions)?;
    let split = |spec: DatasetSpec| -> CliResult<Vec<SphereSample>> {
        (0..spec.n as u64)
            .into_par_iter()
            .map(|i| generate_sample(&spec, &centers, i).map_err(CliError::from))
            .collect()
    };
    let mut train_spec = DatasetSpec::train(cfg.n_train, seed);
    train_spec.n_regions = cfg.n_regions;
    train_spec.sigma_max = cfg.train_sigma_max;
    train_spec.outlier_max = cfg.train_outlier_max;
    let mut test_spec = DatasetSpec::test(cfg.n_test, seed.wrapping_add(1));
    test_spec.n_regions = cfg.n_regions;

    let train_sha256 = write_dataset(&cfg.train_path, &split(train_spec)?)?;
    println!("train {} records sha256 {train_sha256}", cfg.n_train);
    let test_sha256 = write_dataset(&cfg.test_path, &split(test_spec)?)?;
    println!("test {} records sha256 {test_sha256}", cfg.n_test);
    Ok(GenOutput { train_sha256, test_sha256 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub epoch: usize,
    pub loss_pose: f64,
    pub loss_rot: f64,
    pub loss_center: f64,
    pub loss_z: f64,
    pub lr: f64,
}

impl From<&StepLog> for LossRow {
    fn from(s: &StepLog) -> Self {
        Self {
            step: s.step,
            epoch: s.epoch,
            loss_pose: s.loss_pose,
            loss_rot: s.loss_rot,
            loss_center: s.loss_center,
            loss_z: s.loss_z,
            lr: s.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout_rel_add: Option<f64>,
}

pub fn loss_curve_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("loss_curve.csv")
}

pub fn epochs_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("epochs.csv")
}

/// Appends rows to a CSV file, writing the header only when the file is new.
fn append_csv<T: Serialize>(path: &Path, rows: &[T], fresh: bool) -> CliResult<()> {
    create_parent(path)?;
    let exists = !fresh && path.exists();
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(f);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::format(path, e.to_string())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    append_csv(path, rows, true)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| csv_err(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub first_step: u64,
    pub last_step: Option<u64>,
    pub epochs: Vec<EpochRow>,
}

/// Trains the network and writes the checkpoint after every epoch. With
/// `resume` the checkpoint's parameters and optimizer state are loaded and
/// the run continues where it stopped.
pub fn cmd_train(cfg: &RunConfig, seed: u64, resume: bool) -> CliResult<TrainOutput> {
    let data = read_dataset(&cfg.train_path, None)?;
    let heldout = if cfg.heldout > 0 && cfg.test_path.exists() {
        read_dataset(&cfg.test_path, Some(cfg.heldout))?
    } else {
        Vec::new()
    };
    let tc = cfg.train_config(seed);
    let centers = if cfg.augment { region_centers(cfg.n_regions)? } else { Vec::new() };
    let loss = LossConfig::new(cfg.rot_mode()?, cfg.loss_mode()?, sphere_model_points());

    let (mut net, mut state) = if resume {
        let ck = Checkpoint::read(&cfg.checkpoint)?;
        let net = ck.network(&cfg.checkpoint)?;
        if net.cfg != cfg.net_config()? {
            return Err(CliError::Config("checkpoint architecture differs from the configuration".into()));
        }
        let mut state = tc.optimizer(&net.params, data.len());
        if !ck.restore_optimizer(&cfg.checkpoint, &net, &mut state)? {
            return Err(CliError::format(&cfg.checkpoint, "no optimizer state to resume from"));
        }
        (net, state)
    } else {
        let net = PatchPnp::<f32>::new(cfg.net_config()?, seed)?;
        let state = tc.optimizer(&net.params, data.len());
        (net, state)
    };
    let first_step = state.step;
    let total = tc.total_steps(data.len());
    let per_epoch = data.len().div_ceil(tc.batch_size) as u64;
    log::info!("training {} samples, steps {first_step}..{total}, {} parameters", data.len(), net.params.numel());

    let mut fresh = !resume;
    let mut last_step = None;
    let mut epochs = Vec::new();
    while state.step < total {
        let stop = ((state.step / per_epoch + 1) * per_epoch).min(total);
        let chunk = posebench::patch_pnp::TrainConfig { max_steps: Some(stop), ..tc.clone() };
        let mut rows = Vec::new();
        let report =
            train(&mut net, &mut state, &data, &heldout, &centers, &chunk, &loss, |s| rows.push(LossRow::from(s)))?;
        if state.step < stop {
            return Err(CliError::Config(format!("training stopped at step {} before {stop}", state.step)));
        }
        last_step = rows.last().map(|r| r.step).or(last_step);
        append_csv(&loss_curve_path(cfg), &rows, fresh)?;
        let ep: Vec<EpochRow> = report
            .epochs
            .iter()
            .map(|e| EpochRow { epoch: e.epoch, mean_loss: e.mean_loss, heldout_rel_add: e.heldout_rel_add })
            .collect();
        append_csv(&epochs_path(cfg), &ep, fresh)?;
        epochs.extend(ep);
        fresh = false;
        Checkpoint::capture(&net, Some(&state))?.write(&cfg.checkpoint)?;
    }
    if let Some(e) = epochs.last() {
        println!(
            "trained to step {} (epoch {}), mean loss {:.5}{}",
            state.step,
            e.epoch + 1,
            e.mean_loss,
            e.heldout_rel_add.map_or(String::new(), |v| format!(", held-out rel ADD {v:.4}"))
        );
    }
    Ok(TrainOutput { first_step, last_step, epochs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    EpnpRansac,
    PatchPnp,
    /// Ground-truth poses, for checking the evaluation itself.
    Oracle,
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Solver::EpnpRansac => "epnp_ransac",
            Solver::PatchPnp => "patch_pnp",
            Solver::Oracle => "oracle",
        })
    }
}

impl std::str::FromStr for Solver {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "epnp_ransac" => Ok(Solver::EpnpRansac),
            "patch_pnp" => Ok(Solver::PatchPnp),
            "oracle" => Ok(Solver::Oracle),
            _ => Err(CliError::Config(format!("unknown solver '{s}'"))),
        }
    }
}

/// Seed of the RANSAC sampler for sample `index` of grid cell `cell`.
fn sample_seed(seed: u64, cell: u64, index: u64) -> u64 {
    stream_rng(seed, (cell << 32) | index).next_u64()
}

/// Poses from EPnP/RANSAC on each sample's maps; `None` marks a solver failure.
pub fn solve_ransac(
    cfg: &RunConfig,
    samples: &[SphereSample],
    maps: &[&GeoMaps],
    seed: u64,
    cell: u64,
) -> Vec<Option<Pose<f64>>> {
    samples
        .par_iter()
        .zip(maps.par_iter())
        .enumerate()
        .map(|(i, (s, m))| {
            let c = maps_to_correspondences(m, &s.k, &SPHERE_EXTENTS).ok()?.subsample(cfg.max_correspondences);
            let rc = cfg.ransac_config(sample_seed(seed, cell, i as u64));
            ransac_pnp(&c, &s.k, &rc).ok().map(|o| o.pose)
        })
        .collect()
}

/// Poses from the network on each sample's maps and stored crop.
pub fn solve_network(
    net: &PatchPnp<f32>,
    samples: &[SphereSample],
    maps: &[&GeoMaps],
) -> CliResult<Vec<Option<Pose<f64>>>> {
    let parts: Vec<Vec<Pose<f64>>> = samples
        .par_chunks(EVAL_BATCH)
        .zip(maps.par_chunks(EVAL_BATCH))
        .map(|(s, m)| predict_samples(net, s, m, ZOOM_SIZE, EVAL_BATCH))
        .collect::<Result<_, _>>()?;
    Ok(parts.into_iter().flatten().map(Some).collect())
}

/// Relative ADD per sample, `None` where the solver failed.
pub fn relative_errors(poses: &[Option<Pose<f64>>], samples: &[SphereSample]) -> Vec<Option<f64>> {
    let pts = sphere_model_points();
    poses
        .par_iter()
        .zip(samples.par_iter())
        .map(|(p, s)| p.as_ref().map(|p| relative_add(p, &s.pose, &pts, s.diameter)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub solver: Solver,
    pub sigma: f64,
    pub outlier_ratio: f64,
    pub mean_rel_add: f64,
    pub median_rel_add: f64,
    pub n_samples: usize,
    pub wall_ms_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub records: Vec<BenchRecord>,
    /// Solver failures per record, in record order; failed samples are left
    /// out of the means and of `n_samples`.
    pub failures: Vec<usize>,
}

pub fn bench_csv_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("bench.csv")
}

/// Runs both solvers over the noise grid and writes `bench.csv`, `bench.json` and `bench.svg`.
pub fn cmd_bench(cfg: &RunConfig, seed: u64) -> CliResult<BenchOutput> {
    let ck = Checkpoint::read(&cfg.checkpoint)?;
    let net = ck.network(&cfg.checkpoint)?;
    let samples = read_dataset(&cfg.test_path, cfg.bench_samples)?;
    if samples.is_empty() {
        return Err(CliError::format(&cfg.test_path, "test split is empty"));
    }
    let n = samples.len();
    let mut out = BenchOutput { records: Vec::new(), failures: Vec::new() };
    let mut cell = 0u64;
    for &sigma in &cfg.sigma_grid {
        for &ratio in &cfg.outlier_grid {
            let maps: Vec<GeoMaps> = samples
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let noise =
                        NoiseSpec { sigma, outlier_ratio: ratio, seed: sample_seed(seed ^ NOISE_SALT, cell, i as u64) };
                    corrupt_maps(&s.maps, &noise)
                })
                .collect::<Result<_, _>>()?;
            let refs: Vec<&GeoMaps> = maps.iter().collect();
            for solver in [Solver::EpnpRansac, Solver::PatchPnp] {
                let t0 = Instant::now();
                let poses = match solver {
                    Solver::EpnpRansac => solve_ransac(cfg, &samples, &refs, seed, cell),
                    _ => solve_network(&net, &samples, &refs)?,
                };
                let ms = t0.elapsed().as_secs_f64() * 1e3 / n as f64;
                let errs: Vec<f64> = relative_errors(&poses, &samples).into_iter().flatten().collect();
                let rec = BenchRecord {
                    solver,
                    sigma,
                    outlier_ratio: ratio,
                    mean_rel_add: mean(&errs),
                    median_rel_add: median(&errs),
                    n_samples: errs.len(),
                    wall_ms_per_sample: if cfg.timing { ms } else { 0.0 },
                };
                log::info!(
                    "{solver} sigma {sigma} outliers {ratio}: mean {:.5} median {:.5} ({} failures)",
                    rec.mean_rel_add,
                    rec.median_rel_add,
                    n - errs.len()
                );
                out.failures.push(n - errs.len());
                out.records.push(rec);
            }
            cell += 1;
        }
    }
    write_csv(&bench_csv_path(cfg), &out.records)?;
    let json_path = cfg.out_dir.join("bench.json");
    let json = serde_json::to_string_pretty(&out).map_err(|e| CliError::format(&json_path, e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| CliError::io(&json_path, e))?;
    let svg_path = cfg.out_dir.join("bench.svg");
    std::fs::write(&svg_path, bench_plot(&out.records)).map_err(|e| CliError::io(&svg_path, e))?;
    for r in &out.records {
        println!(
            "{:<12} sigma {:<6} outliers {:<4} mean {:.5} median {:.5} n {}",
            r.solver.to_string(),
            r.sigma,
            r.outlier_ratio,
            r.mean_rel_add,
            r.median_rel_add,
            r.n_samples
        );
    }
    Ok(out)
}

/// Summary metrics of one solver on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub solver: Solver,
    pub n_samples: usize,
    pub n_failures: usize,
    pub mean_rel_add: f64,
    pub median_rel_add: f64,
    /// Fraction with ADD below 0.1 of the diameter.
    pub add_recall: f64,
    /// Fraction within `n_deg` degrees and `n_cm` centimeters.
    pub deg_cm_recall: f64,
}

/// Scores predicted poses against the samples' ground truth. Failed samples
/// count as misses in both recalls and are left out of the mean and median.
pub fn evaluate(
    solver: Solver,
    poses: &[Option<Pose<f64>>],
    samples: &[SphereSample],
    n_deg: f64,
    n_cm: f64,
) -> EvalReport {
    let rel = relative_errors(poses, samples);
    let ok: Vec<f64> = rel.iter().flatten().copied().collect();
    let n = samples.len();
    // Relative errors against a unit diameter; failures never pass.
    let all: Vec<f64> = rel.iter().map(|e| e.unwrap_or(f64::INFINITY)).collect();
    let sym = [RotationMatrix::identity()];
    let hits = poses
        .iter()
        .zip(samples)
        .filter(|(p, s)| p.as_ref().is_some_and(|p| ndeg_ncm(p, &s.pose, &sym, n_deg, n_cm)))
        .count();
    EvalReport {
        solver,
        n_samples: n,
        n_failures: n - ok.len(),
        mean_rel_add: mean(&ok),
        median_rel_add: median(&ok),
        add_recall: add_recall(&all, 1.0, 0.1),
        deg_cm_recall: hits as f64 / n.max(1) as f64,
    }
}

/// Evaluates `solver` on the stored maps of `dataset` and writes `eval.json` and `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, solver: Solver, dataset: &Path, seed: u64) -> CliResult<EvalReport> {
    let samples = read_dataset(dataset, None)?;
    let maps: Vec<&GeoMaps> = samples.iter().map(|s| &s.maps).collect();
    let poses = match solver {
        Solver::Oracle => samples.iter().map(|s| Some(s.pose)).collect(),
        Solver::EpnpRansac => solve_ransac(cfg, &samples, &maps, seed, 0),
        Solver::PatchPnp => {
            let ck = Checkpoint::read(&cfg.checkpoint)?;
            solve_network(&ck.network(&cfg.checkpoint)?, &samples, &maps)?
        }
    };
    let report = evaluate(solver, &poses, &samples, cfg.n_deg, cfg.n_cm);
    let json_path = cfg.out_dir.join("eval.json");
    create_parent(&json_path)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::format(&json_path, e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| CliError::io(&json_path, e))?;
    write_csv(&cfg.out_dir.join("eval.csv"), std::slice::from_ref(&report))?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
    Ok(report)
}
