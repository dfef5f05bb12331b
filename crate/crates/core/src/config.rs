//! The experiment configuration file: one JSON document binding every stage.

use crate::datagen::{GenConfig, SplitConfig};
use crate::energy::EnergyConfig;
use crate::model::{GroupRates, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {section}: {message}")]
    Invalid { section: &'static str, message: String },
    #[error("config schema version {found}, expected {expected}")]
    Schema { found: u32, expected: u32 },
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
}

/// Seeds for every stochastic stage. Data generation uses `datagen.seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub split: u64,
    pub model: u64,
    pub train: u64,
    pub annotation: u64,
    pub spot_check: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            split: 11,
            model: 23,
            train: 37,
            annotation: 41,
            spot_check: 53,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Period1Config {
    pub train: TrainConfig,
    pub energy: EnergyConfig,
}

impl Default for Period1Config {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 40,
                batch_size: 64,
                rates: GroupRates {
                    feature: 0.01,
                    classifier: 0.01,
                    memory: 0.0001,
                },
                ..TrainConfig::default()
            },
            energy: EnergyConfig {
                fine_tune: TrainConfig {
                    epochs: 10,
                    batch_size: 96,
                    rates: GroupRates {
                        feature: 0.01,
                        classifier: 0.01,
                        memory: 0.0001,
                    },
                    ..TrainConfig::default()
                },
                ..EnergyConfig::default()
            },
        }
    }
}

/// The semi-supervised update of periods 2 and later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub semi_repeats: usize,
    pub epochs_per_repeat: usize,
    pub batch_size: usize,
    /// Share of each mixed batch drawn from the pseudo-labelled pool.
    pub pseudo_fraction: f64,
    pub rates: GroupRates,
    pub lr_decay_epochs: usize,
    pub lr_decay_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub oltr: bool,
    /// Share of human-annotated events per category held out for validation.
    pub holdout_fraction: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            semi_repeats: 3,
            epochs_per_repeat: 30,
            batch_size: 64,
            pseudo_fraction: 0.5,
            rates: GroupRates {
                feature: 0.003,
                classifier: 0.01,
                memory: 0.001,
            },
            lr_decay_epochs: 10,
            lr_decay_ratio: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            oltr: true,
            holdout_fraction: 0.2,
        }
    }
}

impl UpdateConfig {
    /// Training settings of one repeat.
    pub fn repeat_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs_per_repeat,
            batch_size: self.batch_size,
            rates: self.rates,
            lr_decay_epochs: self.lr_decay_epochs,
            lr_decay_ratio: self.lr_decay_ratio,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.semi_repeats * self.epochs_per_repeat
    }

    /// Pseudo and human rows of a full mixed batch.
    pub fn batch_split(&self) -> (usize, usize) {
        let p = (self.batch_size as f64 * self.pseudo_fraction).round() as usize;
        (p, self.batch_size - p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AnnotatorConfig {
    Oracle {
        error_rate: f64,
    },
    Human {
        lease_secs: u64,
        /// How long to wait for the queue to drain before checkpointing and exiting.
        timeout_secs: u64,
    },
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self::Oracle { error_rate: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpotCheckConfig {
    pub size: usize,
    /// Feed expert corrections into the next period's human-label pool.
    pub merge_corrections: bool,
}

impl Default for SpotCheckConfig {
    fn default() -> Self {
        Self {
            size: 100,
            merge_corrections: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub token: Option<String>,
    pub static_dir: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8787".into(),
            token: None,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Train the full-annotation transfer baseline each period for comparison.
    pub transfer: bool,
    /// Run the no-human-label ablation each period.
    pub pseudo_only: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            transfer: true,
            pseudo_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Seeds,
    pub datagen: GenConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub period1: Period1Config,
    pub update: UpdateConfig,
    pub period_n_energy: EnergyConfig,
    /// Share of each category's abundance drawn again for periods 3 and later.
    pub followup_share: f64,
    pub annotator: AnnotatorConfig,
    pub spot_check: SpotCheckConfig,
    pub service: ServiceConfig,
    pub baselines: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            seeds: Seeds::default(),
            datagen: GenConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            period1: Period1Config::default(),
            update: UpdateConfig::default(),
            period_n_energy: EnergyConfig {
                temperature: 0.06,
                fine_tune: TrainConfig {
                    epochs: 10,
                    batch_size: 96,
                    rates: GroupRates {
                        feature: 0.0001,
                        classifier: 0.0001,
                        memory: 0.0001,
                    },
                    ..TrainConfig::default()
                },
                ..EnergyConfig::default()
            },
            followup_share: 0.5,
            annotator: AnnotatorConfig::default(),
            spot_check: SpotCheckConfig::default(),
            service: ServiceConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A small profile (16 categories, short schedules) that runs a period in well
    /// under a second. Meant for smoke runs and tests, not for conclusions.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.datagen.n_categories = 16;
        c.datagen.max_abundance = 400;
        c.datagen.min_abundance = 60;
        c.datagen.dim = 8;
        c.datagen.partition = crate::datagen::NoveltyPartition {
            group1: 7,
            group2_only: 5,
            left_out: 4,
        };
        c.period1.train.epochs = 12;
        c.period1.energy.fine_tune.epochs = 3;
        c.period_n_energy.fine_tune.epochs = 2;
        c.update.semi_repeats = 2;
        c.update.epochs_per_repeat = 10;
        c.update.lr_decay_epochs = 6;
        c.update.batch_size = 32;
        c.spot_check.size = 20;
        c
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical JSON form, leaving out settings that cannot change
    /// results: the service section and the human annotator's lease and timeout.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.service = ServiceConfig::default();
        if let AnnotatorConfig::Human {
            lease_secs,
            timeout_secs,
        } = &mut c.annotator
        {
            *lease_secs = 0;
            *timeout_secs = 0;
        }
        let compact = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(compact))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |section: &'static str, message: String| Err(ConfigError::Invalid { section, message });
        if self.schema_version != crate::SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: self.schema_version,
                expected: crate::SCHEMA_VERSION,
            });
        }
        if let Err(e) = self.datagen.validate() {
            return bad("datagen", e.to_string());
        }
        if let Err(e) = self.split.validate() {
            return bad("split", e.to_string());
        }
        if self.model.hidden == 0 || self.model.embedding == 0 {
            return bad("model", "hidden and embedding widths must be positive".into());
        }
        if let Err(e) = self.period1.train.validate() {
            return bad("period1.train", e.to_string());
        }
        if let Err(e) = self.period1.energy.validate() {
            return bad("period1.energy", e.to_string());
        }
        if let Err(e) = self.period_n_energy.validate() {
            return bad("period_n_energy", e.to_string());
        }
        let u = &self.update;
        if !(0.0..=1.0).contains(&u.pseudo_fraction) {
            return bad(
                "update",
                format!("pseudo_fraction must be in [0,1], got {}", u.pseudo_fraction),
            );
        }
        if !(0.0..1.0).contains(&u.holdout_fraction) {
            return bad(
                "update",
                format!("holdout_fraction must be in [0,1), got {}", u.holdout_fraction),
            );
        }
        if u.semi_repeats == 0 {
            return bad("update", "semi_repeats must be at least 1".into());
        }
        if let Err(e) = u.repeat_train_config(0).validate() {
            return bad("update", e.to_string());
        }
        if !(self.followup_share > 0.0 && self.followup_share <= 1.0) {
            return bad(
                "followup_share",
                format!("must be in (0,1], got {}", self.followup_share),
            );
        }
        match self.annotator {
            AnnotatorConfig::Oracle { error_rate } if !(0.0..=1.0).contains(&error_rate) => {
                bad("annotator", format!("error_rate must be in [0,1], got {error_rate}"))
            }
            AnnotatorConfig::Human { timeout_secs: 0, .. } => bad("annotator", "timeout_secs must be positive".into()),
            _ => Ok(()),
        }
    }
}
