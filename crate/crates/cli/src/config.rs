//! TOML run configuration for `wdsc train` and `wdsc sweep`.

use anyhow::{bail, Context};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use wdsc_core::{Metric, TrainConfig, Variant};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub n: usize,
    pub n_w: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub metric: String,
    pub lr: f64,
    pub lr_floor: f64,
    pub plateau_patience: usize,
    pub max_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub val_every: u64,
    pub val_pairs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lambda: 1000.0,
            alpha: 1.0,
            beta: 1.0,
            metric: "mse".into(),
            lr: 1e-4,
            lr_floor: 1e-7,
            plateau_patience: 5,
            max_iters: 2000,
            batch_size: 1,
            seed: 1,
            val_every: 500,
            val_pairs: 8,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// "synthetic" or "folder"
    pub kind: String,
    pub count: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub root: Option<PathBuf>,
    /// Synthetic pairs held out for validation/testing.
    pub holdout: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.variant()?;
        cfg.metric()?;
        Ok(cfg)
    }

    pub fn variant(&self) -> anyhow::Result<Variant> {
        match self.model.variant.as_str() {
            "factorized" => Ok(Variant::Factorized),
            "hyperprior" => Ok(Variant::Hyperprior),
            other => bail!("unknown variant {other:?} (factorized | hyperprior)"),
        }
    }

    pub fn metric(&self) -> anyhow::Result<Metric> {
        match self.train.metric.as_str() {
            "mse" => Ok(Metric::Mse),
            "msssim" => Ok(Metric::Msssim),
            other => bail!("unknown metric {other:?} (mse | msssim)"),
        }
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        Ok(TrainConfig {
            lambda: self.train.lambda,
            alpha: self.train.alpha,
            beta: self.train.beta,
            metric: self.metric()?,
            variant: self.variant()?,
            lr: self.train.lr,
            lr_floor: self.train.lr_floor,
            plateau_patience: self.train.plateau_patience,
            max_iters: self.train.max_iters,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            n: self.model.n,
            n_w: self.model.n_w.unwrap_or(self.model.n),
            val_every: self.train.val_every,
            val_pairs: self.train.val_pairs,
        })
    }
}
