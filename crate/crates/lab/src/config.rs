//! Experiment configuration and its canonical JSON echo.

use std::path::{Path, PathBuf};

use ifso::net::TrainConfig;
use ifso::pruner::PruneConfig;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetKind, DatasetSpec};
use crate::verify::{BoundsSuite, Fig1Config, QuadraticSuite};
use crate::LabError;

/// Which split losses and accuracies are reported on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSplit {
    #[default]
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub quadratic: QuadraticSuite,
    pub bounds: BoundsSuite,
    pub fig1: Fig1Config,
    /// Architecture of the score cross-check; brute force needs at most 2000 parameters.
    pub score_arch: String,
    /// Samples in the batch used by the score cross-check.
    pub score_batch_size: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            quadratic: QuadraticSuite::default(),
            bounds: BoundsSuite::default(),
            fig1: Fig1Config::default(),
            score_arch: "mlp:2-12-8-2".into(),
            score_batch_size: 16,
        }
    }
}

/// Grids of the `sweep` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    /// FLOPs reductions of the prune-percentage grid.
    pub fractions: Vec<f64>,
    /// Hybrid switch points as fractions of the prune target.
    pub hybrid_t_over_p: Vec<f64>,
    pub scorers: Vec<ifso::influence::Scorer>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        use ifso::influence::Scorer;
        Self {
            seeds: vec![0, 1, 2],
            fractions: vec![0.3, 0.5, 0.7],
            hybrid_t_over_p: vec![0.0, 0.5, 1.0],
            scorers: vec![Scorer::Ifso, Scorer::Magnitude, Scorer::Random { seed: 0 }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: String,
    pub dataset: DatasetSpec,
    pub pretrain: TrainConfig,
    pub prune: PruneConfig,
    pub finetune: TrainConfig,
    pub loss_split: LossSplit,
    pub out_dir: PathBuf,
    pub verify: VerifyConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: "mlp-tiny".into(),
            dataset: DatasetSpec::blobs(400, 1.0, 0),
            pretrain: TrainConfig { epochs: 60, ..TrainConfig::default() },
            prune: PruneConfig::default(),
            finetune: TrainConfig { epochs: 20, ..TrainConfig::default() },
            loss_split: LossSplit::Train,
            out_dir: PathBuf::from("runs/default"),
            verify: VerifyConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, LabError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Sets the master seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.prune.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.prune.validate()?;
        self.verify.fig1.validate()?;
        if !(self.dataset.split_fraction > 0.0 && self.dataset.split_fraction <= 1.0) {
            return Err(LabError::Invalid(format!("dataset.split_fraction must be in (0, 1], got {}", self.dataset.split_fraction)));
        }
        if let DatasetKind::Blobs { classes, .. } = self.dataset.kind {
            if classes < 2 {
                return Err(LabError::Invalid("blobs need at least 2 classes".into()));
            }
        }
        if self.sweep.seeds.is_empty() {
            return Err(LabError::Invalid("sweep.seeds must not be empty".into()));
        }
        if self.sweep.fractions.iter().chain(&self.sweep.hybrid_t_over_p).any(|f| !(0.0..=1.0).contains(f)) {
            return Err(LabError::Invalid("sweep fractions must lie in [0, 1]".into()));
        }
        ifso::net::build_model(&self.arch, self.seed)?;
        Ok(())
    }

    /// Pretty JSON with object keys sorted.
    pub fn canonical_json(&self) -> Result<String, LabError> {
        // serde_json's default map is ordered by key
        let value = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }
}
