//! End-to-end runs: data, pretraining, pruning, fine-tuning and their artifacts.

use std::fmt::Write as _;
use std::path::Path;

use ifso::costmodel::{model_flops, model_params};
use ifso::net::{build_model, checkpoint, evaluate, train, Dataset, GatedModel, TrainHistory};
use ifso::pruner::{finetune, prune, PruneOutcome};

use crate::config::{ExperimentConfig, LossSplit};
use crate::datasets::gen_dataset;
use crate::{write_file, LabError, StageExt};

pub const METRICS_HEADER: &str = "stage,split,loss,accuracy,flops,params";

#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub stage: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub pretrained: GatedModel,
    pub pruned: PruneOutcome,
    pub finetuned: GatedModel,
    pub metrics: Vec<StageMetrics>,
}

pub struct Splits {
    pub train: Dataset,
    pub holdout: Dataset,
}

impl Splits {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self, LabError> {
        let (train, holdout) = gen_dataset(&cfg.dataset).stage("dataset")?;
        Ok(Self { train, holdout })
    }

    /// The split losses are reported on; an empty holdout falls back to train.
    pub fn eval(&self, split: LossSplit) -> &Dataset {
        match split {
            LossSplit::Holdout if !self.holdout.is_empty() => &self.holdout,
            _ => &self.train,
        }
    }
}

pub fn split_name(split: LossSplit) -> &'static str {
    match split {
        LossSplit::Train => "train",
        LossSplit::Holdout => "holdout",
    }
}

pub fn measure(stage: &'static str, model: &GatedModel, data: &Dataset) -> Result<StageMetrics, LabError> {
    let (loss, accuracy) = evaluate(model, data)?;
    Ok(StageMetrics { stage, loss, accuracy, flops: model_flops(model, true)?, params: model_params(model, true)? })
}

pub fn metrics_csv(metrics: &[StageMetrics], split: LossSplit) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(out, "{},{},{},{},{},{}", m.stage, split_name(split), m.loss, m.accuracy, m.flops, m.params);
    }
    out
}

/// Builds the configured model and trains it on the train split.
pub fn pretrain(cfg: &ExperimentConfig, splits: &Splits) -> Result<(GatedModel, TrainHistory), LabError> {
    let mut model = build_model(&cfg.arch, cfg.seed).stage("model")?;
    let history = train(&mut model, &splits.train, &cfg.pretrain).stage("pretrain")?;
    Ok((model, history))
}

/// Dataset generation and pretraining only. Writes the config echo, history and checkpoint.
pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<GatedModel, LabError> {
    cfg.validate()?;
    write_file(out, "config.json", cfg.canonical_json()?)?;
    let splits = Splits::generate(cfg)?;
    let (model, history) = pretrain(cfg, &splits)?;
    write_file(out, "pretrain_history.csv", history.to_csv())?;
    checkpoint::save(&out.join("pretrained.ckpt"), &model).stage("checkpoint")?;
    let metrics = vec![measure("pretrained", &model, splits.eval(cfg.loss_split)).stage("evaluate")?];
    write_file(out, "final_metrics.csv", metrics_csv(&metrics, cfg.loss_split))?;
    Ok(model)
}

/// The full pipeline into `out`.
///
/// Files: `config.json`, `pretrain_history.csv`, `pretrained.ckpt`, `prune_log.csv`,
/// `finetune_history.csv`, `final.ckpt` (compacted, fine-tuned) and `final_metrics.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome, LabError> {
    cfg.validate()?;
    write_file(out, "config.json", cfg.canonical_json()?)?;
    let splits = Splits::generate(cfg)?;
    let eval = splits.eval(cfg.loss_split);

    let (pretrained, history) = pretrain(cfg, &splits)?;
    write_file(out, "pretrain_history.csv", history.to_csv())?;
    checkpoint::save(&out.join("pretrained.ckpt"), &pretrained).stage("checkpoint")?;

    let pruned = prune(&pretrained, &splits.train, &cfg.prune).stage("prune")?;
    write_file(out, "prune_log.csv", pruned.log.to_csv())?;

    let (finetuned, ft_history) = finetune(&pruned.compacted, &splits.train, &cfg.finetune).stage("finetune")?;
    write_file(out, "finetune_history.csv", ft_history.to_csv())?;
    checkpoint::save(&out.join("final.ckpt"), &finetuned).stage("checkpoint")?;

    let metrics = vec![
        measure("pretrained", &pretrained, eval).stage("evaluate")?,
        measure("pruned", &pruned.compacted, eval).stage("evaluate")?,
        measure("finetuned", &finetuned, eval).stage("evaluate")?,
    ];
    write_file(out, "final_metrics.csv", metrics_csv(&metrics, cfg.loss_split))?;
    Ok(ExperimentOutcome { pretrained, pruned, finetuned, metrics })
}
