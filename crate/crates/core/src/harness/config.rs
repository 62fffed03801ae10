use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitSizes, SyntheticFieldSpec};
use crate::error::{Error, Result};
use crate::incremental::{FreezeOptions, IndexInit};
use crate::losses::{AdamWConfig, LAMBDA};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Pressure levels per upper-air group.
    pub levels: usize,
    pub initial_pairs: usize,
    pub incremental_pairs: usize,
    pub test_pairs: usize,
    /// Frames skipped between the training and test windows.
    pub gap: usize,
    /// Rollout start points used for evaluation (evenly spaced over the test
    /// split); 0 uses every start.
    pub eval_starts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            levels: 3,
            initial_pairs: 256,
            incremental_pairs: 128,
            test_pairs: 64,
            gap: 8,
            eval_starts: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr_initial: f64,
    pub lr_incremental: f64,
    pub epochs_initial: usize,
    pub epochs_incremental: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip: f64,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub lat_weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: LAMBDA,
            lr_initial: 5e-3,
            lr_incremental: 2.5e-3,
            epochs_initial: 12,
            epochs_incremental: 12,
            batch_size: 8,
            weight_decay: 0.01,
            clip: 1.0,
            eval_every: 4,
            lat_weighted: false,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self, lr: f64) -> AdamWConfig {
        let mut c = AdamWConfig::with_lr(lr);
        c.weight_decay = self.weight_decay;
        c.clip = (self.clip > 0.0).then_some(self.clip);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncrementalConfig {
    pub index_init: IndexInit,
    pub freeze_old_decoder: bool,
    pub freeze_up_proj: bool,
    /// Drop a random half of the old channels from every incremental sample
    /// (zeroed input, excluded from the loss).
    pub subsample_old: bool,
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        let f = FreezeOptions::default();
        IncrementalConfig {
            index_init: IndexInit::Reinit,
            freeze_old_decoder: f.freeze_old_decoder,
            freeze_up_proj: f.freeze_up_proj,
            subsample_old: false,
        }
    }
}

impl IncrementalConfig {
    pub fn freeze(&self) -> FreezeOptions {
        FreezeOptions {
            freeze_old_decoder: self.freeze_old_decoder,
            freeze_up_proj: self.freeze_up_proj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgettingConfig {
    /// Number of consecutive seeds starting at the run seed.
    pub seeds: usize,
}

impl Default for ForgettingConfig {
    fn default() -> Self {
        ForgettingConfig { seeds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub end_to_end_tolerance: f64,
    /// Fraction of parameters perturbed in the end-to-end check.
    pub end_to_end_fraction: f64,
    /// Model used for the end-to-end check.
    pub model: ModelConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            end_to_end_tolerance: 1e-3,
            end_to_end_fraction: 0.01,
            model: ModelConfig {
                height: 8,
                width: 16,
                latent: 16,
                heads: 2,
                blocks: 2,
                k: 4,
                patch: 2,
                kernel: 3,
            },
        }
    }
}

/// Optional inputs; anything missing is produced on demand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Initial-phase checkpoint used as the base of incremental training.
    pub initial_checkpoint: Option<PathBuf>,
    /// Normalisation statistics belonging to `initial_checkpoint`.
    pub initial_stats: Option<PathBuf>,
    /// Checkpoint to evaluate.
    pub checkpoint: Option<PathBuf>,
    /// Statistics belonging to `checkpoint`.
    pub stats: Option<PathBuf>,
    /// Raw (unnormalised) test dataset to evaluate on.
    pub dataset: Option<PathBuf>,
}

/// Every knob of an experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub incremental: IncrementalConfig,
    pub forgetting: ForgettingConfig,
    pub gradcheck: GradcheckConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gradcheck.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let d = &self.data;
        if d.levels == 0 || d.initial_pairs == 0 || d.test_pairs == 0 {
            return bad("levels, initial_pairs and test_pairs must be positive");
        }
        if d.incremental_pairs == 0 || d.incremental_pairs > d.initial_pairs {
            return bad("incremental_pairs must be in 1..=initial_pairs");
        }
        if d.test_pairs < 6 {
            return bad("test_pairs must allow a 5-step rollout");
        }
        let t = &self.train;
        if !(t.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(t.lr_initial > 0.0 && t.lr_incremental > 0.0) {
            return bad("learning rates must be positive");
        }
        if t.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(t.weight_decay >= 0.0 && t.clip >= 0.0) {
            return bad("weight_decay and clip must be non-negative");
        }
        if self.forgetting.seeds == 0 {
            return bad("forgetting.seeds must be positive");
        }
        let g = &self.gradcheck;
        if !(g.step > 0.0 && g.tolerance > 0.0 && g.end_to_end_tolerance > 0.0) {
            return bad("gradcheck step and tolerances must be positive");
        }
        if !(g.end_to_end_fraction > 0.0 && g.end_to_end_fraction <= 1.0) {
            return bad("gradcheck.end_to_end_fraction must be in (0, 1]");
        }
        self.optimizer_check()?;
        self.field_spec(self.seed).validate()
    }

    fn optimizer_check(&self) -> Result<()> {
        self.train.optimizer(self.train.lr_initial).validate()?;
        self.train.optimizer(self.train.lr_incremental).validate()
    }

    /// Simulator settings for a data seed.
    pub fn field_spec(&self, seed: u64) -> SyntheticFieldSpec {
        SyntheticFieldSpec::desk(self.model.height, self.model.width, self.data.levels, seed)
    }

    pub fn split_sizes(&self) -> SplitSizes {
        SplitSizes {
            initial: self.data.initial_pairs,
            incremental: self.data.incremental_pairs,
            test: self.data.test_pairs,
            gap: self.data.gap,
        }
    }
}
