//! Pruning loops: score accumulation, group selection, masking and compaction.
//!
//! One action of the incremental loop draws `k` rounds of proxy batches,
//! adds each round's normalized scores to an accumulator (with one gradient
//! step on the weights after every round), removes the least important
//! group(s) and resets the accumulator. One-shot mode accumulates once and
//! removes every group needed to reach the target in a single action; hybrid
//! runs incrementally up to a first reduction and finishes one-shot.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::FdConfig;
use crate::costmodel::{channel_costs, model_flops, model_params, trace_couplings, ChannelId, CouplingGroup};
use crate::error::{Error, Result};
use crate::influence::{accumulate, score_model, AccumulatorState, Normalization, Scorer, SolverChoice};
use crate::ndtensor::SeededRng;
use crate::net::{sgd_step, train, Batch, Dataset, GatedModel, LayerParams, LayerSpec, SgdState, TrainConfig, TrainHistory};
use crate::ndtensor::Tensor;

const PRUNE_STREAM: u64 = 0x9E11;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    Incremental,
    Oneshot,
    /// Incremental until FLOPs are reduced by `t`, then one-shot to the target.
    Hybrid { t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Fraction of the original FLOPs to remove.
    pub target_flops_reduction: f64,
    pub k_accumulate: usize,
    pub score_batches: usize,
    pub score_batch_size: usize,
    pub channels_per_action: usize,
    pub mode: PruneMode,
    pub scorer: Scorer,
    pub solver: SolverChoice,
    pub normalization: Normalization,
    pub fd: FdConfig,
    /// Learning rate of the gradient step after each accumulation round; 0 disables it.
    pub step_lr: f64,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            target_flops_reduction: 0.5,
            k_accumulate: 10,
            score_batches: 2,
            score_batch_size: 64,
            channels_per_action: 1,
            mode: PruneMode::Incremental,
            scorer: Scorer::Ifso,
            solver: SolverChoice::Identity,
            normalization: Normalization::SqrtMem,
            fd: FdConfig::default(),
            step_lr: 0.01,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.target_flops_reduction;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("target_flops_reduction must be in [0,1), got {p}")));
        }
        if let PruneMode::Hybrid { t } = self.mode {
            if !(0.0..=p).contains(&t) {
                return Err(Error::Config(format!("hybrid t must be in [0, {p}], got {t}")));
            }
        }
        if self.k_accumulate == 0 || self.score_batches == 0 || self.score_batch_size == 0 {
            return Err(Error::Config("k_accumulate, score_batches and score_batch_size must be positive".into()));
        }
        if self.channels_per_action == 0 {
            return Err(Error::Config("channels_per_action must be at least 1".into()));
        }
        if !(self.step_lr >= 0.0 && self.step_lr.is_finite()) {
            return Err(Error::Config("step_lr must be finite and non-negative".into()));
        }
        self.solver.validate()?;
        self.fd.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneAction {
    pub step: usize,
    pub channels: Vec<ChannelId>,
    pub score: f64,
    pub flops_frac: f64,
    pub params_frac: f64,
    pub proxy_loss: f64,
    /// Score sweeps spent so far.
    pub wall_step_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub actions: Vec<PruneAction>,
    pub score_sweeps: usize,
}

impl PruneLog {
    pub const HEADER: &'static str = "step,channel_ids,score,flops_frac,params_frac,proxy_loss";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for a in &self.actions {
            let ids: Vec<String> = a.channels.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{},{},{},{},{},{}", a.step, ids.join(";"), a.score, a.flops_frac, a.params_frac, a.proxy_loss);
        }
        out
    }

    pub fn final_flops_frac(&self) -> Option<f64> {
        self.actions.last().map(|a| a.flops_frac)
    }
}

fn is_active(model: &GatedModel, group: &CouplingGroup) -> bool {
    group.members.iter().all(|&m| model.gate(m).is_some_and(|g| g != 0.0))
}

fn active_per_layer(model: &GatedModel) -> BTreeMap<usize, usize> {
    model
        .gates
        .iter()
        .enumerate()
        .filter_map(|(l, g)| g.as_ref().map(|g| (l, g.iter().filter(|&&x| x != 0.0).count())))
        .collect()
}

/// Active groups ordered by summed accumulated score, ties by smallest member.
fn ranked<'g>(model: &GatedModel, accum: &AccumulatorState, groups: &'g [CouplingGroup]) -> Vec<(&'g CouplingGroup, f64)> {
    let mut out: Vec<(&CouplingGroup, f64)> = groups
        .iter()
        .filter(|g| is_active(model, g))
        .map(|g| (g, g.members.iter().map(|m| accum.running_sum.get(m).copied().unwrap_or(0.0)).sum()))
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.key().cmp(&b.0.key())));
    out
}

/// Walks groups in ranked order, skipping any whose removal would empty a
/// layer, and keeps taking them while `more` says so.
fn walk<'g>(
    model: &GatedModel,
    accum: &AccumulatorState,
    groups: &'g [CouplingGroup],
    mut more: impl FnMut(&[&'g CouplingGroup]) -> Result<bool>,
) -> Result<Vec<(&'g CouplingGroup, f64)>> {
    let mut width = active_per_layer(model);
    let mut chosen: Vec<(&CouplingGroup, f64)> = Vec::new();
    for (g, score) in ranked(model, accum, groups) {
        let mut per_layer: BTreeMap<usize, usize> = BTreeMap::new();
        for m in &g.members {
            *per_layer.entry(m.layer).or_default() += 1;
        }
        if per_layer.iter().any(|(l, n)| width[l] <= *n) {
            continue;
        }
        let taken: Vec<&CouplingGroup> = chosen.iter().map(|c| c.0).collect();
        if !more(&taken)? {
            break;
        }
        for (l, n) in per_layer {
            *width.get_mut(&l).expect("gated layer") -= n;
        }
        chosen.push((g, score));
    }
    Ok(chosen)
}

/// The shortest prefix of ranked groups holding at least `b` channels.
pub fn select_groups(
    model: &GatedModel,
    accum: &AccumulatorState,
    groups: &[CouplingGroup],
    b: usize,
) -> Result<Vec<CouplingGroup>> {
    if !accum.is_full() {
        return Err(Error::Prune(format!("accumulator holds {} of {} draws", accum.count, accum.k_target)));
    }
    let chosen = walk(model, accum, groups, |taken| Ok(taken.iter().map(|g| g.len()).sum::<usize>() < b))?;
    if chosen.is_empty() {
        return Err(Error::Prune("every layer is at its minimum width".into()));
    }
    Ok(chosen.into_iter().map(|(g, _)| g.clone()).collect())
}

/// Ranked groups taken until the active FLOPs fall to `target_flops` or below.
fn select_until(
    model: &GatedModel,
    accum: &AccumulatorState,
    groups: &[CouplingGroup],
    target_flops: f64,
) -> Result<Vec<CouplingGroup>> {
    let mut trial = model.clone();
    let mut applied = 0;
    let chosen = walk(model, accum, groups, |taken| {
        for g in &taken[applied..] {
            for &m in &g.members {
                trial.set_gate(m, 0.0)?;
            }
        }
        applied = taken.len();
        Ok(model_flops(&trial, true)? as f64 > target_flops)
    })?;
    let mut check = model.clone();
    for (g, _) in &chosen {
        for &m in &g.members {
            check.set_gate(m, 0.0)?;
        }
    }
    if model_flops(&check, true)? as f64 > target_flops {
        return Err(Error::Prune("target unreachable under the layer-width floor".into()));
    }
    Ok(chosen.into_iter().map(|(g, _)| g.clone()).collect())
}

/// Sets every member gate to exactly 0. Weights are untouched.
pub fn apply_prune(model: &mut GatedModel, groups: &[CouplingGroup]) -> Result<()> {
    let mut next = model.clone();
    for g in groups {
        for &m in &g.members {
            match next.gate(m) {
                Some(v) if v != 0.0 => next.set_gate(m, 0.0)?,
                Some(_) => return Err(Error::Prune(format!("channel {m} is already pruned"))),
                None => return Err(Error::Prune(format!("channel {m} is not gated"))),
            }
        }
    }
    if let Some((l, _)) = active_per_layer(&next).into_iter().find(|&(_, n)| n == 0) {
        return Err(Error::Prune(format!("pruning would empty layer {l}")));
    }
    *model = next;
    Ok(())
}

/// Every coupling group is entirely active or entirely pruned.
pub fn coupling_intact(model: &GatedModel, groups: &[CouplingGroup]) -> bool {
    groups.iter().all(|g| {
        let alive = |m: ChannelId| model.gate(m).map(|v| v != 0.0);
        let first = alive(g.members[0]);
        g.members.iter().all(|&m| alive(m) == first)
    })
}

/// Physically removes zero-gated channels. Non-zero gates are folded into the
/// producing weights, so every remaining gate is 1.
pub fn compact(model: &GatedModel) -> Result<GatedModel> {
    model.validate()?;
    if !coupling_intact(model, &trace_couplings(model)?) {
        return Err(Error::Prune("coupling group with mixed gate states".into()));
    }
    let shapes = model.layer_shapes()?;
    // kept channel (or feature) indices of each layer's output
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(model.layers.len());
    let input_keep: Vec<usize> = (0..model.input_shape[0]).collect();
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut params = Vec::with_capacity(model.layers.len());
    let mut gates = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let in_keep = if i == 0 { input_keep.clone() } else { kept[i - 1].clone() };
        let (spec, p, g, out_keep) = match *layer {
            LayerSpec::Dense { outputs, gated, .. } | LayerSpec::Conv2d { out_channels: outputs, gated, .. } => {
                let gate = model.gates[i].clone().unwrap_or_else(|| vec![1.0; outputs]);
                let out_keep: Vec<usize> = (0..outputs).filter(|&c| gate[c] != 0.0).collect();
                let src = model.params[i].as_ref().expect("linear layer has params");
                let (spec, weight) = match *layer {
                    LayerSpec::Dense { .. } => {
                        let w = src.weight.data();
                        let mut data = Vec::with_capacity(in_keep.len() * out_keep.len());
                        for &r in &in_keep {
                            data.extend(out_keep.iter().map(|&c| w[r * outputs + c] * gate[c]));
                        }
                        (
                            LayerSpec::Dense { inputs: in_keep.len(), outputs: out_keep.len(), gated },
                            Tensor::new(vec![in_keep.len(), out_keep.len()], data)?,
                        )
                    }
                    LayerSpec::Conv2d { in_channels, kernel, stride, pad, .. } => {
                        let w = src.weight.data();
                        let kk = kernel * kernel;
                        let mut data = Vec::with_capacity(out_keep.len() * in_keep.len() * kk);
                        for &o in &out_keep {
                            for &c in &in_keep {
                                let base = (o * in_channels + c) * kk;
                                data.extend(w[base..base + kk].iter().map(|v| v * gate[o]));
                            }
                        }
                        (
                            LayerSpec::Conv2d {
                                in_channels: in_keep.len(),
                                out_channels: out_keep.len(),
                                kernel,
                                stride,
                                pad,
                                gated,
                            },
                            Tensor::new(vec![out_keep.len(), in_keep.len(), kernel, kernel], data)?,
                        )
                    }
                    _ => unreachable!(),
                };
                let bias = Tensor::new(vec![out_keep.len()], out_keep.iter().map(|&c| src.bias.data()[c] * gate[c]).collect())?;
                let g = gated.then(|| vec![1.0; out_keep.len()]);
                (spec, Some(LayerParams { weight, bias }), g, out_keep)
            }
            LayerSpec::Relu | LayerSpec::AvgPool { .. } => (layer.clone(), None, None, in_keep),
            LayerSpec::Flatten => {
                let before = if i == 0 { &model.input_shape } else { &shapes[i - 1] };
                let per: usize = before[1..].iter().product();
                let features = in_keep.iter().flat_map(|&c| c * per..(c + 1) * per).collect();
                (layer.clone(), None, None, features)
            }
            LayerSpec::ResidualAdd { from } => {
                if kept[from] != in_keep {
                    return Err(Error::Prune(format!("residual operands of layer {i} keep different channels")));
                }
                (layer.clone(), None, None, in_keep)
            }
        };
        if out_keep.is_empty() {
            return Err(Error::Prune(format!("layer {i} would have no channels")));
        }
        layers.push(spec);
        params.push(p);
        gates.push(g);
        kept.push(out_keep);
    }
    let out = GatedModel { arch: model.arch.clone(), input_shape: model.input_shape.clone(), layers, params, gates };
    out.validate()?;
    Ok(out)
}

/// Result of a pruning run.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    /// The model with pruned gates at 0 (weights include the interleaved gradient steps).
    pub masked: GatedModel,
    pub compacted: GatedModel,
    pub log: PruneLog,
}

struct Engine<'a> {
    data: &'a Dataset,
    cfg: &'a PruneConfig,
    groups: Vec<CouplingGroup>,
    rng: SeededRng,
    flops0: f64,
    params0: f64,
    log: PruneLog,
}

impl Engine<'_> {
    fn flops_frac(&self, model: &GatedModel) -> Result<f64> {
        Ok(model_flops(model, true)? as f64 / self.flops0)
    }

    /// `k` rounds of scoring, each followed by one gradient step on the same batches.
    fn accumulate(&mut self, model: &mut GatedModel) -> Result<AccumulatorState> {
        let cfg = self.cfg;
        let mut accum = AccumulatorState::new(cfg.k_accumulate);
        let step_cfg = TrainConfig { lr: cfg.step_lr, momentum: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
        for _ in 0..cfg.k_accumulate {
            let batches = self.data.random_batches(cfg.score_batches, cfg.score_batch_size, &mut self.rng)?;
            let scorer = match cfg.scorer {
                Scorer::Random { seed } => Scorer::Random { seed: SeededRng::new(seed).split(self.log.score_sweeps as u64).next_u64() },
                s => s,
            };
            let scores = score_model(model, scorer, &batches, &cfg.solver, &cfg.fd)?;
            let costs = channel_costs(model)?;
            accumulate(&mut accum, &scores, &self.groups, &costs, cfg.normalization)?;
            self.log.score_sweeps += 1;
            if cfg.step_lr > 0.0 {
                sgd_step(model, &Batch::concat(&batches)?, &step_cfg, &mut SgdState::default())?;
            }
        }
        Ok(accum)
    }

    fn record(&mut self, model: &GatedModel, chosen: &[CouplingGroup], accum: &AccumulatorState) -> Result<()> {
        let mut channels: Vec<ChannelId> = chosen.iter().flat_map(|g| g.members.iter().copied()).collect();
        channels.sort_unstable();
        let score = channels.iter().map(|c| accum.running_sum.get(c).copied().unwrap_or(0.0)).sum();
        let action = PruneAction {
            step: self.log.actions.len() + 1,
            channels,
            score,
            flops_frac: self.flops_frac(model)?,
            params_frac: model_params(model, true)? as f64 / self.params0,
            proxy_loss: model.forward_loss(&self.data.full_batch())?,
            wall_step_count: self.log.score_sweeps,
        };
        self.log.actions.push(action);
        Ok(())
    }

    /// Incremental actions until the FLOPs reduction reaches `reduction`.
    fn incremental(&mut self, model: &mut GatedModel, reduction: f64) -> Result<()> {
        while self.flops_frac(model)? > 1.0 - reduction {
            let accum = self.accumulate(model)?;
            let chosen = select_groups(model, &accum, &self.groups, self.cfg.channels_per_action)?;
            apply_prune(model, &chosen)?;
            self.record(model, &chosen, &accum)?;
        }
        Ok(())
    }

    /// One accumulation, then a single action reaching `reduction`.
    fn oneshot(&mut self, model: &mut GatedModel, reduction: f64) -> Result<()> {
        if self.flops_frac(model)? <= 1.0 - reduction {
            return Ok(());
        }
        let accum = self.accumulate(model)?;
        let chosen = select_until(model, &accum, &self.groups, (1.0 - reduction) * self.flops0)?;
        apply_prune(model, &chosen)?;
        self.record(model, &chosen, &accum)
    }
}

/// Runs the configured pruning mode.
pub fn prune(model: &GatedModel, data: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    let mut engine = Engine {
        data,
        cfg,
        groups: trace_couplings(&model)?,
        rng: SeededRng::new(cfg.seed).split(PRUNE_STREAM),
        flops0: model_flops(&model, true)? as f64,
        params0: model_params(&model, true)? as f64,
        log: PruneLog::default(),
    };
    let p = cfg.target_flops_reduction;
    match cfg.mode {
        PruneMode::Incremental => engine.incremental(&mut model, p)?,
        PruneMode::Oneshot => engine.oneshot(&mut model, p)?,
        PruneMode::Hybrid { t } => {
            engine.incremental(&mut model, t)?;
            engine.oneshot(&mut model, p)?;
        }
    }
    let compacted = compact(&model)?;
    Ok(PruneOutcome { masked: model, compacted, log: engine.log })
}

pub fn prune_incremental(model: &GatedModel, data: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome> {
    prune(model, data, &PruneConfig { mode: PruneMode::Incremental, ..cfg.clone() })
}

pub fn prune_oneshot(model: &GatedModel, data: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome> {
    prune(model, data, &PruneConfig { mode: PruneMode::Oneshot, ..cfg.clone() })
}

pub fn prune_hybrid(model: &GatedModel, data: &Dataset, cfg: &PruneConfig, t: f64) -> Result<PruneOutcome> {
    prune(model, data, &PruneConfig { mode: PruneMode::Hybrid { t }, ..cfg.clone() })
}

/// Post-pruning training of the compacted model.
pub fn finetune(model: &GatedModel, data: &Dataset, cfg: &TrainConfig) -> Result<(GatedModel, TrainHistory)> {
    let mut out = model.clone();
    let history = train(&mut out, data, cfg)?;
    Ok((out, history))
}
