use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};
use posebench::patch_pnp::{LossMode, RotMode};
use posebench::synth::{DEFAULT_REGIONS, TRAIN_OUTLIER_MAX, TRAIN_SIGMA_MAX};

/// Every setting of a run as one flat document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub checkpoint: PathBuf,
    /// Directory for CSV, JSON and SVG outputs.
    pub out_dir: PathBuf,

    pub n_train: usize,
    pub n_test: usize,
    pub n_regions: usize,
    pub train_sigma_max: f64,
    pub train_outlier_max: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub anneal_point: f64,
    pub augment: bool,
    pub rot_mode: String,
    pub loss_mode: String,
    pub sra_regions: usize,
    /// Test samples evaluated after each epoch for monitoring; 0 disables.
    pub heldout: usize,
    pub max_steps: Option<u64>,

    pub sigma_grid: Vec<f64>,
    pub outlier_grid: Vec<f64>,
    /// Limits the benchmark to the first samples of the test split.
    pub bench_samples: Option<usize>,
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    pub ransac_confidence: f64,
    pub max_correspondences: usize,
    /// Record wall-clock time per sample; off keeps `bench.csv` reproducible.
    pub timing: bool,

    pub n_deg: f64,
    pub n_cm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_path: "data/train.gdrs".into(),
            test_path: "data/test.gdrs".into(),
            checkpoint: "runs/model.gdrc".into(),
            out_dir: "runs".into(),
            n_train: 20_000,
            n_test: 2_000,
            n_regions: DEFAULT_REGIONS,
            train_sigma_max: TRAIN_SIGMA_MAX,
            train_outlier_max: TRAIN_OUTLIER_MAX,
            epochs: 30,
            batch_size: 24,
            lr: 1e-4,
            anneal_point: posebench::nn::ANNEAL_POINT,
            augment: true,
            rot_mode: RotMode::AlloRot6d.name().into(),
            loss_mode: LossMode::DisentangledSite.name().into(),
            sra_regions: 0,
            heldout: 200,
            max_steps: None,
            sigma_grid: vec![0.0, 0.005, 0.01, 0.02, 0.03],
            outlier_grid: vec![0.0, 0.1, 0.3],
            bench_samples: None,
            ransac_iterations: 100,
            ransac_threshold: 3.0,
            ransac_confidence: 0.99,
            max_correspondences: posebench::pnp::MAX_CORRESPONDENCES,
            timing: false,
            n_deg: 2.0,
            n_cm: 2.0,
        }
    }
}

impl RunConfig {
    /// Reads an optional JSON file, applies `key=value` overrides and checks the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(CliError::Config(format!("{}: top level must be an object", p.display()))),
                    Err(e) => return Err(CliError::Config(format!("{}: {e}", p.display()))),
                }
            }
            None => Map::new(),
        };
        for o in overrides {
            let (k, v) =
                o.split_once('=').ok_or_else(|| CliError::Config(format!("override '{o}' is not key=value")))?;
            // Bare words that are not JSON are taken as strings.
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            doc.insert(k.trim().to_string(), v);
        }
        let cfg: Self = serde_json::from_value(Value::Object(doc)).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.rot_mode()?;
        self.loss_mode()?;
        if self.n_train == 0 || self.n_test == 0 {
            return bad("split sizes must be positive".into());
        }
        if self.n_regions == 0 || self.n_regions > 255 || self.sra_regions > self.n_regions {
            return bad(format!("n_regions {} / sra_regions {} out of range", self.n_regions, self.sra_regions));
        }
        if self.sigma_grid.is_empty() || self.outlier_grid.is_empty() {
            return bad("noise grids must not be empty".into());
        }
        if self.sigma_grid.iter().chain([&self.train_sigma_max]).any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise levels must be finite and non-negative".into());
        }
        if self.outlier_grid.iter().chain([&self.train_outlier_max]).any(|r| !(0.0..=1.0).contains(r)) {
            return bad("outlier ratios must lie in [0, 1]".into());
        }
        if self.max_correspondences < 4 {
            return bad("max_correspondences must be at least 4".into());
        }
        if !(self.n_deg > 0.0 && self.n_cm > 0.0) {
            return bad("n_deg and n_cm must be positive".into());
        }
        self.train_config(0).validate()?;
        self.ransac_config(0).validate()?;
        Ok(())
    }

    pub fn rot_mode(&self) -> CliResult<RotMode> {
        Ok(self.rot_mode.parse()?)
    }

    pub fn loss_mode(&self) -> CliResult<LossMode> {
        Ok(self.loss_mode.parse()?)
    }

    pub fn train_config(&self, seed: u64) -> posebench::patch_pnp::TrainConfig {
        posebench::patch_pnp::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            anneal_point: self.anneal_point,
            seed,
            augment: self.augment,
            sigma_max: self.train_sigma_max,
            outlier_max: self.train_outlier_max,
            zoom_size: posebench::patch_pnp::ZOOM_SIZE,
            max_steps: self.max_steps,
        }
    }

    pub fn ransac_config(&self, seed: u64) -> posebench::pnp::RansacConfig {
        posebench::pnp::RansacConfig {
            iterations: self.ransac_iterations,
            reproj_threshold: self.ransac_threshold,
            confidence: self.ransac_confidence,
            sample_size: 4,
            seed,
        }
    }

    pub fn net_config(&self) -> CliResult<posebench::patch_pnp::NetConfig> {
        Ok(posebench::patch_pnp::NetConfig {
            rot_mode: self.rot_mode()?,
            sra_regions: self.sra_regions,
            ..Default::default()
        })
    }

    /// Keys accepted in a config document, in declaration order.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_parse_json_then_strings() {
        let c = RunConfig::load(None, &["epochs=2".into(), "rot_mode=allo_quat".into(), "sigma_grid=[0,0.1]".into()])
            .unwrap();
        assert_eq!(c.epochs, 2);
        assert_eq!(c.rot_mode, "allo_quat");
        assert_eq!(c.sigma_grid, vec![0.0, 0.1]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::load(None, &["epoch=2".into()]).unwrap_err();
        assert!(matches!(e, CliError::Config(_)), "{e}");
        assert!(RunConfig::load(None, &["rot_mode=euler".into()]).is_err());
        assert!(RunConfig::load(None, &["outlier_grid=[1.5]".into()]).is_err());
    }
}
