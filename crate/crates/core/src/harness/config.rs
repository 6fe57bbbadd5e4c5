//! Experiment configuration, read from and written back to TOML with every
//! default filled in.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSpec, Family};
use crate::adapters::{Method, ShapePreset, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::nn::{BackboneConfig, MlpConfig, PretrainConfig, TransformerConfig};
use crate::swag::{CovNormalization, DEFAULT_COV_RANK, DEFAULT_SAMPLES};
use crate::train::TrainConfig;

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label echoed into every record; defaults to the dataset family.
    pub name: Option<String>,
    /// `roberta-large-count-only` skips training and reports counts only.
    pub preset: Option<String>,
    pub method: Method,
    pub rank: usize,
    /// SWAG covariance rank k; ignored for non-Bayesian methods.
    pub cov_rank: usize,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    /// Epochs of SWAG collection after burn-in; one snapshot per epoch.
    pub swag_epochs: usize,
    /// Overrides `train.burn_in_epochs` when set.
    pub swag_start_epoch: Option<usize>,
    /// Constant SWAG learning rate; defaults to `train.lr_max`.
    pub swag_lr: Option<f64>,
    /// BMA sample count S.
    pub samples: usize,
    pub subsample: f64,
    pub ece_bins: usize,
    pub cov_normalization: CovNormalization,
    /// Also train a full-rank delta on the classifier head.
    pub train_head: bool,
    /// Seed of the shared pretrained backbone.
    pub pretrain_seed: u64,
    /// Record wall time; when false the column is written as 0.
    pub timing: bool,
    pub dataset: DatasetSpec,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("mlp").expect("built-in preset")
    }
}

impl ExperimentConfig {
    /// Built-in starting points: `mlp`, `transformer`,
    /// `roberta-large-count-only`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            name: None,
            preset: None,
            method: Method::BLoraXs,
            rank: 8,
            cov_rank: DEFAULT_COV_RANK,
            alpha: DEFAULT_ALPHA,
            seeds: DEFAULT_SEEDS.to_vec(),
            swag_epochs: 20,
            swag_start_epoch: None,
            swag_lr: None,
            samples: DEFAULT_SAMPLES,
            subsample: 1.0,
            ece_bins: crate::metrics::DEFAULT_ECE_BINS,
            cov_normalization: CovNormalization::KMinusOne,
            train_head: false,
            pretrain_seed: 0,
            timing: true,
            dataset: DatasetSpec {
                n_target_train: 100,
                rotation: 1.0,
                label_noise: 0.1,
                ..DatasetSpec::default()
            },
            backbone: BackboneConfig::Mlp(MlpConfig {
                hidden: vec![32, 32, 32],
                ..MlpConfig::default()
            }),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
        };
        match name {
            "mlp" => {}
            "transformer" => {
                cfg.dataset = DatasetSpec {
                    family: Family::SeqMajority,
                    noise: 0.6,
                    rotation: 0.6,
                    label_noise: 0.1,
                    ..DatasetSpec::default()
                };
                let seq_len = cfg.dataset.seq_len;
                cfg.backbone = BackboneConfig::Transformer(TransformerConfig {
                    input: cfg.dataset.features(),
                    seq_len,
                    classes: cfg.dataset.classes,
                    ..TransformerConfig::default()
                });
                cfg.dataset.n_source = 1000;
                cfg.dataset.n_val = 500;
            }
            "roberta-large-count-only" | "roberta-large" => {
                cfg.preset = Some("roberta-large-count-only".into());
            }
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dataset_label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| match self.count_preset() {
                Some(_) => "roberta-large".into(),
                None => self.dataset.family.to_string(),
            })
    }

    /// Shape preset for count-only runs.
    pub fn count_preset(&self) -> Option<ShapePreset> {
        self.preset
            .as_deref()
            .and_then(|p| ShapePreset::by_name(p).ok())
            .filter(|p| matches!(p, ShapePreset::RobertaLarge))
    }

    /// k as used by the run: 0 for non-Bayesian methods.
    pub fn effective_cov_rank(&self) -> Option<usize> {
        self.method.is_bayesian().then_some(self.cov_rank)
    }

    pub fn burn_in_epochs(&self) -> usize {
        self.swag_start_epoch.unwrap_or(self.train.burn_in_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.preset {
            ShapePreset::by_name(p)?;
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config(format!(
                "subsample must lie in (0, 1], got {}",
                self.subsample
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if self.method.is_bayesian() && self.cov_rank > 0 && self.swag_epochs == 1 {
            return Err(Error::Config(
                "a low-rank SWAG posterior needs at least two collection epochs".into(),
            ));
        }
        if self.count_preset().is_some() {
            return Ok(());
        }
        self.dataset.validate()?;
        let bb = &self.backbone;
        if bb.input() != self.dataset.features() || bb.classes() != self.dataset.classes {
            return Err(Error::Config(format!(
                "backbone expects {} features / {} classes, dataset has {} / {}",
                bb.input(),
                bb.classes(),
                self.dataset.features(),
                self.dataset.classes
            )));
        }
        if bb.seq_len() != self.dataset.rows_per_example() {
            return Err(Error::Config(
                "backbone seq_len does not match dataset".into(),
            ));
        }
        if let BackboneConfig::Mlp(m) = bb {
            m.validate()?;
        }
        if bb.adapter_sites(self.method.mode()).is_empty() {
            return Err(Error::Config("backbone has no adapter sites".into()));
        }
        Ok(())
    }
}
