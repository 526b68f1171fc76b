//! Seeded grids of pruning runs.
//!
//! Every cell owns its model clone and RNG streams, cells run in parallel and
//! results come back in cell-key order.

use std::fmt::Write as _;

use ifso::influence::Scorer;
use ifso::net::GatedModel;
use ifso::pruner::{finetune, prune, PruneConfig, PruneMode};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::experiment::{measure, pretrain, Splits};
use crate::{LabError, StageExt};

#[derive(Debug, Clone, PartialEq)]
pub struct PruneCell {
    pub seed: u64,
    pub scorer: &'static str,
    pub fraction: f64,
    pub flops_frac: f64,
    pub params_frac: f64,
    pub acc_pretrained: f64,
    pub acc_pruned: f64,
    pub acc_finetuned: f64,
    pub score_sweeps: usize,
}

pub const PRUNE_GRID_HEADER: &str =
    "seed,scorer,fraction,flops_frac,params_frac,acc_pretrained,acc_pruned,acc_finetuned,score_sweeps";

pub fn prune_grid_csv(cells: &[PruneCell]) -> String {
    let mut out = format!("{PRUNE_GRID_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.seed, c.scorer, c.fraction, c.flops_frac, c.params_frac, c.acc_pretrained, c.acc_pruned, c.acc_finetuned, c.score_sweeps
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridCell {
    pub seed: u64,
    pub t_over_p: f64,
    pub flops_frac: f64,
    pub acc_finetuned: f64,
    pub score_sweeps: usize,
}

pub const HYBRID_GRID_HEADER: &str = "seed,t_over_p,flops_frac,acc_finetuned,score_sweeps";

pub fn hybrid_grid_csv(cells: &[HybridCell]) -> String {
    let mut out = format!("{HYBRID_GRID_HEADER}\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{},{},{}", c.seed, c.t_over_p, c.flops_frac, c.acc_finetuned, c.score_sweeps);
    }
    out
}

struct Seeded {
    cfg: ExperimentConfig,
    splits: Splits,
    model: GatedModel,
}

fn pretrained_per_seed(cfg: &ExperimentConfig) -> Result<Vec<Seeded>, LabError> {
    cfg.validate()?;
    cfg.sweep
        .seeds
        .par_iter()
        .map(|&seed| {
            let cfg = cfg.clone().with_seed(seed);
            let splits = Splits::generate(&cfg)?;
            let (model, _) = pretrain(&cfg, &splits)?;
            Ok(Seeded { cfg, splits, model })
        })
        .collect()
}

/// Prune, compact and fine-tune one cell; returns (outcome flops frac, params frac, sweeps, acc pruned, acc finetuned).
fn run_cell(s: &Seeded, prune_cfg: &PruneConfig) -> Result<(f64, f64, usize, f64, f64), LabError> {
    let eval = s.splits.eval(s.cfg.loss_split);
    let out = prune(&s.model, &s.splits.train, prune_cfg).stage("prune")?;
    let (ft, _) = finetune(&out.compacted, &s.splits.train, &s.cfg.finetune).stage("finetune")?;
    let base = measure("pretrained", &s.model, eval)?;
    let pruned = measure("pruned", &out.compacted, eval)?;
    let tuned = measure("finetuned", &ft, eval)?;
    Ok((
        pruned.flops as f64 / base.flops as f64,
        pruned.params as f64 / base.params as f64,
        out.log.score_sweeps,
        pruned.accuracy,
        tuned.accuracy,
    ))
}

/// Every (seed, scorer, fraction) cell of the prune-percentage grid.
pub fn prune_grid(cfg: &ExperimentConfig) -> Result<Vec<PruneCell>, LabError> {
    let seeded = pretrained_per_seed(cfg)?;
    let mut keys = Vec::new();
    for (si, _) in seeded.iter().enumerate() {
        for &scorer in &cfg.sweep.scorers {
            for &fraction in &cfg.sweep.fractions {
                keys.push((si, scorer, fraction));
            }
        }
    }
    keys.par_iter()
        .map(|&(si, scorer, fraction)| {
            let s = &seeded[si];
            let scorer = match scorer {
                Scorer::Random { .. } => Scorer::Random { seed: s.cfg.seed },
                other => other,
            };
            let acc_pretrained = measure("pretrained", &s.model, s.splits.eval(s.cfg.loss_split))?.accuracy;
            let prune_cfg = PruneConfig { target_flops_reduction: fraction, scorer, ..s.cfg.prune.clone() };
            let (flops_frac, params_frac, score_sweeps, acc_pruned, acc_finetuned) = run_cell(s, &prune_cfg)?;
            Ok(PruneCell {
                seed: s.cfg.seed,
                scorer: scorer.label(),
                fraction,
                flops_frac,
                params_frac,
                acc_pretrained,
                acc_pruned,
                acc_finetuned,
                score_sweeps,
            })
        })
        .collect()
}

/// Every (seed, t/p) cell of the hybrid grid at the configured prune target.
pub fn hybrid_grid(cfg: &ExperimentConfig) -> Result<Vec<HybridCell>, LabError> {
    let seeded = pretrained_per_seed(cfg)?;
    let p = cfg.prune.target_flops_reduction;
    let mut keys = Vec::new();
    for (si, _) in seeded.iter().enumerate() {
        for &ratio in &cfg.sweep.hybrid_t_over_p {
            keys.push((si, ratio));
        }
    }
    keys.par_iter()
        .map(|&(si, ratio)| {
            let s = &seeded[si];
            let prune_cfg = PruneConfig { mode: PruneMode::Hybrid { t: (ratio * p).min(p) }, ..s.cfg.prune.clone() };
            let (flops_frac, _, score_sweeps, _, acc_finetuned) = run_cell(s, &prune_cfg)?;
            Ok(HybridCell { seed: s.cfg.seed, t_over_p: ratio, flops_frac, acc_finetuned, score_sweeps })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = crate::datasets::DatasetSpec::blobs(80, 0.8, 0);
        cfg.pretrain.epochs = 3;
        cfg.finetune.epochs = 1;
        cfg.prune.k_accumulate = 1;
        cfg.prune.channels_per_action = 16;
        cfg.prune.target_flops_reduction = 0.3;
        cfg.sweep.seeds = vec![0, 1];
        cfg.sweep.fractions = vec![0.2, 0.3];
        cfg
    }

    #[test]
    fn grid_is_ordered_and_reproducible() {
        let cfg = tiny();
        let a = prune_grid(&cfg).unwrap();
        assert_eq!(a.len(), 2 * 3 * 2);
        assert_eq!((a[0].seed, a[0].scorer, a[0].fraction), (0, "ifso", 0.2));
        assert_eq!(a.last().map(|c| (c.seed, c.scorer)), Some((1, "random")));
        assert!(a.iter().all(|c| c.flops_frac <= 1.0 - c.fraction + 1e-12));
        assert_eq!(prune_grid_csv(&a), prune_grid_csv(&prune_grid(&cfg).unwrap()));
    }

    #[test]
    fn hybrid_sweep_counts_grow_with_t() {
        let cfg = tiny();
        let cells = hybrid_grid(&cfg).unwrap();
        for seed_cells in cells.chunks(3) {
            assert!(seed_cells.windows(2).all(|w| w[0].score_sweeps <= w[1].score_sweeps));
        }
    }
}
