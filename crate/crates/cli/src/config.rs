use std::fs;
use std::path::{Path, PathBuf};

use cmedl::metrics::{DEFAULT_TAU_MM, DropoutConfig};
use cmedl::metrics::kl::DEFAULT_BINS;
use cmedl::metrics::separability::SeparabilityOptions;
use cmedl::synthdata::PhantomConfig;
use cmedl::trainer::TrainConfig;
use cmedl::Error;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub tau_mm: f64,
    pub kl_bins: usize,
    pub dropout_rate: f64,
    pub dropout_runs: usize,
    /// Pixels per class sampled for the separability score.
    pub separability_per_class: usize,
    /// ROI side for the separability score; scales with the image when absent.
    pub separability_roi: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        let d = DropoutConfig::default();
        let s = SeparabilityOptions::default();
        MetricConfig {
            tau_mm: DEFAULT_TAU_MM,
            kl_bins: DEFAULT_BINS,
            dropout_rate: d.rate,
            dropout_runs: d.runs,
            separability_per_class: s.per_class,
            separability_roi: s.roi_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    /// Corpus directory written by `generate-data`.
    pub data_dir: PathBuf,
    /// Parent of training runs and reports.
    pub out_dir: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig { data_dir: "data".into(), out_dir: "runs".into() }
    }
}

impl PathConfig {
    pub fn manifest(&self) -> PathBuf {
        self.data_dir.join(cmedl::synthdata::manifest::MANIFEST_FILE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Overrides `train.seed` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: None,
            phantom: PhantomConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`; a named file must exist and parse.
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("invalid config {}: {e}", p.display())))?
            }
        };
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.train.validate()?;
        let m = &self.metrics;
        if !(m.tau_mm >= 0.0) {
            return Err(Error::Config(format!("metrics.tau_mm must be >= 0, got {}", m.tau_mm)));
        }
        if m.kl_bins < 2 {
            return Err(Error::Config("metrics.kl_bins must be >= 2".into()));
        }
        self.dropout().validate()
    }

    pub fn dropout(&self) -> DropoutConfig {
        DropoutConfig { rate: self.metrics.dropout_rate, runs: self.metrics.dropout_runs, seed: self.seed() }
    }

    pub fn separability(&self) -> SeparabilityOptions {
        SeparabilityOptions {
            roi_size: self.metrics.separability_roi,
            per_class: self.metrics.separability_per_class,
            seed: self.seed(),
        }
    }
}
