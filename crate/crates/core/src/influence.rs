//! Retraining-free loss-change estimates and channel sensitivity scores.
//!
//! Everything here works on any [`GatedObjective`] at a point `(W, M)`, so
//! the same code scores a neural network and a closed-form quadratic. The
//! model-facing wrappers take a [`GatedModel`] and proxy batches.
//!
//! - Loss change after pruning to `M̂`, with `W` re-fitted:
//!   `ΔL ≈ ΔL_ex − ½ gᵀH⁻¹g`, `g = ∇_W L(W, M̂)`, `H` evaluated at `(W, M̂)`.
//! - Sensitivity of channel `j`: `S_j = |(G H⁻¹ Gᵀ 𝟙)_j|` with
//!   `G = ∂²L/∂M∂W` and `H` at `(W, M)`, evaluated in two passes:
//!   `ḡ = ∂_M-direction-𝟙 of ∇_W L`, `v = H⁻¹ḡ`, `S = |∂_W-direction-v of ∇_M L|`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{check_finite, directional_second_derivative, hessian_vector_product, FdConfig, GatedObjective, LossGrad, Role};
use crate::costmodel::{ChannelCost, ChannelId, CouplingGroup};
use crate::error::{Error, Result};
use crate::ndtensor::SeededRng;
use crate::net::{Batch, GatedModel, LayerSpec, ModelObjective};

/// Weight-plus-gate count above which dense matrices are refused.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverChoice {
    /// `H⁻¹ ≈ I`.
    #[default]
    Identity,
    /// `Σ_{k=0..terms} (I − γH)^k v`, times `γ` when `gamma_scaled`.
    Neumann { terms: usize, gamma: f64, gamma_scaled: bool },
    /// Dense finite-difference Hessian, symmetric eigen pseudo-inverse. Small models only.
    Exact,
}

impl SolverChoice {
    pub fn neumann(terms: usize) -> Self {
        SolverChoice::Neumann { terms, gamma: 0.01, gamma_scaled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if let SolverChoice::Neumann { terms, gamma, .. } = *self {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!("neumann gamma must be positive, got {gamma}")));
            }
            if terms == 0 {
                return Err(Error::Config("neumann terms must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match *self {
            SolverChoice::Identity => "identity".into(),
            SolverChoice::Neumann { terms, gamma, gamma_scaled } => {
                format!("neumann{terms}(gamma={gamma}{})", if gamma_scaled { ",scaled" } else { "" })
            }
            SolverChoice::Exact => "exact".into(),
        }
    }
}

/// Pseudo-inverse solve of a symmetric system; eigenvalues below `1e-12·max|λ|` are dropped.
pub fn symmetric_solve(h: &DMatrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::new(h.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    if top == 0.0 {
        return Err(Error::Singular("hessian is zero".into()));
    }
    let q = &eig.eigenvectors;
    let coeffs = q.transpose() * DVector::from_column_slice(v);
    let scaled = DVector::from_iterator(
        coeffs.len(),
        coeffs.iter().zip(eig.eigenvalues.iter()).map(|(&c, &l)| if l.abs() > 1e-12 * top { c / l } else { 0.0 }),
    );
    Ok((q * scaled).iter().copied().collect())
}

/// `H⁻¹ v` with `H = ∂²L/∂W∂W` at `(weights, gates)`, approximated per `solver`.
pub fn apply_inv_hessian<O: GatedObjective<f64> + ?Sized>(
    obj: &O,
    weights: &[f64],
    gates: &[f64],
    v: &[f64],
    solver: &SolverChoice,
    fd: &FdConfig,
) -> Result<Vec<f64>> {
    solver.validate()?;
    if v.len() != weights.len() {
        return Err(Error::Shape(format!("vector has {} entries, weights {}", v.len(), weights.len())));
    }
    let out = match *solver {
        SolverChoice::Identity => v.to_vec(),
        SolverChoice::Neumann { terms, gamma, gamma_scaled } => {
            let mut term = v.to_vec();
            let mut sum = v.to_vec();
            for _ in 0..terms {
                let hv = hessian_vector_product(obj, weights, gates, &term, fd)?;
                for (t, h) in term.iter_mut().zip(&hv) {
                    *t -= gamma * h;
                }
                for (s, t) in sum.iter_mut().zip(&term) {
                    *s += t;
                }
            }
            if gamma_scaled {
                sum.iter_mut().for_each(|s| *s *= gamma);
            }
            sum
        }
        SolverChoice::Exact => symmetric_solve(&crate::oracle::fd_hessian(obj, weights, gates, fd)?, v)?,
    };
    check_finite(&out, "inverse-hessian product (gamma too large?)")?;
    Ok(out)
}

/// `∂L/∂M` at `(weights, gates)`.
pub fn grad_mask<O: GatedObjective<f64> + ?Sized>(obj: &O, weights: &[f64], gates: &[f64]) -> Result<Vec<f64>> {
    let g = obj.eval(weights, gates)?.grad_m;
    check_finite(&g, "mask gradient")?;
    Ok(g)
}

/// Indicator of gates that are still active (non-zero).
pub fn active_direction(gates: &[f64]) -> Vec<f64> {
    gates.iter().map(|&g| if g != 0.0 { 1.0 } else { 0.0 }).collect()
}

/// `ḡ = Gᵀ𝟙`: the mixed derivative of `∇_W L` along the all-ones gate direction.
///
/// The ones cover active gates only; removed channels stay removed.
pub fn gbar<O: GatedObjective<f64> + ?Sized>(obj: &O, weights: &[f64], gates: &[f64], fd: &FdConfig) -> Result<Vec<f64>> {
    directional_second_derivative(obj, weights, gates, Role::Weight, Role::Mask, &active_direction(gates), fd)
}

/// Raw per-gate scores `|G H⁻¹ ḡ|`; inactive gates get 0.
pub fn sensitivity_raw<O: GatedObjective<f64> + ?Sized>(
    obj: &O,
    weights: &[f64],
    gates: &[f64],
    solver: &SolverChoice,
    fd: &FdConfig,
) -> Result<Vec<f64>> {
    let gb = gbar(obj, weights, gates, fd)?;
    let v = apply_inv_hessian(obj, weights, gates, &gb, solver, fd)?;
    let s = directional_second_derivative(obj, weights, gates, Role::Mask, Role::Weight, &v, fd)?;
    Ok(s.iter().zip(gates).map(|(&x, &g)| if g != 0.0 { x.abs() } else { 0.0 }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossChangeReport {
    pub delta_l_ex: f64,
    pub correction: f64,
    pub estimate: f64,
    pub grad_norm_at_pruned_mask: f64,
    pub solver_used: String,
    pub delta_l_gt_true: Option<f64>,
}

/// Checks that `after` only removes gates of `before`.
pub fn check_removal(before: &[f64], after: &[f64]) -> Result<()> {
    if before.len() != after.len() {
        return Err(Error::Shape("masks differ in length".into()));
    }
    for (j, (&b, &a)) in before.iter().zip(after).enumerate() {
        if a != b && a != 0.0 {
            return Err(Error::Prune(format!("gate {j} changes from {b} to {a}; only removals are allowed")));
        }
    }
    Ok(())
}

/// Second-order estimate of the re-fitted loss change from `mask_before` to `mask_after`.
pub fn prop1_loss_change<O: GatedObjective<f64> + ?Sized>(
    obj: &O,
    w_star: &[f64],
    mask_before: &[f64],
    mask_after: &[f64],
    solver: &SolverChoice,
    fd: &FdConfig,
) -> Result<LossChangeReport> {
    check_removal(mask_before, mask_after)?;
    let before = obj.loss(w_star, mask_before)?;
    let at_pruned: LossGrad<f64> = obj.eval(w_star, mask_after)?;
    let g = at_pruned.grad_w;
    check_finite(&g, "weight gradient at pruned mask")?;
    let hg = apply_inv_hessian(obj, w_star, mask_after, &g, solver, fd)?;
    let correction = 0.5 * g.iter().zip(&hg).map(|(a, b)| a * b).sum::<f64>();
    let delta_l_ex = at_pruned.loss - before;
    Ok(LossChangeReport {
        delta_l_ex,
        correction,
        estimate: delta_l_ex - correction,
        grad_norm_at_pruned_mask: g.iter().map(|x| x * x).sum::<f64>().sqrt(),
        solver_used: solver.label(),
        delta_l_gt_true: None,
    })
}

/// Mean loss of one architecture over several proxy batches.
///
/// Batches are evaluated in parallel and reduced in their given order.
pub struct ProxyObjective<'a> {
    pub model: &'a GatedModel,
    pub batches: &'a [Batch],
    pub l2: f64,
}

impl<'a> ProxyObjective<'a> {
    pub fn new(model: &'a GatedModel, batches: &'a [Batch]) -> Self {
        Self { model, batches, l2: 0.0 }
    }
}

impl GatedObjective<f64> for ProxyObjective<'_> {
    fn num_weights(&self) -> usize {
        self.model.num_weights()
    }

    fn num_gates(&self) -> usize {
        self.model.num_gates()
    }

    fn eval(&self, weights: &[f64], gates: &[f64]) -> Result<LossGrad<f64>> {
        if self.batches.is_empty() {
            return Err(Error::Config("at least one batch is required".into()));
        }
        let parts: Vec<LossGrad<f64>> = self
            .batches
            .par_iter()
            .map(|b| ModelObjective::new(self.model, b).with_l2(self.l2).eval(weights, gates))
            .collect::<Result<_>>()?;
        let k = parts.len() as f64;
        let mut acc = LossGrad { loss: 0.0, grad_w: vec![0.0; weights.len()], grad_m: vec![0.0; gates.len()] };
        for p in &parts {
            acc.loss += p.loss;
            acc.grad_w.iter_mut().zip(&p.grad_w).for_each(|(a, b)| *a += b);
            acc.grad_m.iter_mut().zip(&p.grad_m).for_each(|(a, b)| *a += b);
        }
        acc.loss /= k;
        acc.grad_w.iter_mut().for_each(|a| *a /= k);
        acc.grad_m.iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    }
}

/// Per-channel scores over the active gated channels of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub values: BTreeMap<ChannelId, f64>,
    pub eval_mask_snapshot: Vec<f64>,
    pub eval_batches: usize,
}

impl ScoreVector {
    fn from_flat(model: &GatedModel, flat: &[f64], eval_batches: usize) -> Self {
        let gates = model.gates_flat();
        let values = model
            .gate_ids()
            .into_iter()
            .zip(flat)
            .zip(&gates)
            .filter(|(_, &g)| g != 0.0)
            .map(|((id, &s), _)| (id, s))
            .collect();
        Self { values, eval_mask_snapshot: gates, eval_batches }
    }
}

/// Sensitivity scores of every active gated channel at the model's current `(W, M)`.
pub fn sensitivity_scores(model: &GatedModel, batches: &[Batch], solver: &SolverChoice, fd: &FdConfig) -> Result<ScoreVector> {
    let obj = ProxyObjective::new(model, batches);
    let flat = sensitivity_raw(&obj, &model.weights_flat(), &model.gates_flat(), solver, fd)?;
    Ok(ScoreVector::from_flat(model, &flat, batches.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Mem,
    #[default]
    SqrtMem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorState {
    pub running_sum: BTreeMap<ChannelId, f64>,
    pub count: usize,
    pub k_target: usize,
}

impl AccumulatorState {
    pub fn new(k_target: usize) -> Self {
        Self { running_sum: BTreeMap::new(), count: 0, k_target }
    }

    pub fn reset(&mut self) {
        self.running_sum.clear();
        self.count = 0;
    }

    pub fn is_full(&self) -> bool {
        self.count >= self.k_target
    }
}

/// Adds `S / f(ΔMem)` to the running sums. Every member of a group is
/// normalized by the group's total ΔMem.
pub fn accumulate(
    state: &mut AccumulatorState,
    scores: &ScoreVector,
    groups: &[CouplingGroup],
    costs: &BTreeMap<ChannelId, ChannelCost>,
    normalization: Normalization,
) -> Result<()> {
    if state.is_full() {
        return Err(Error::Prune(format!("accumulator already holds {} of {} draws", state.count, state.k_target)));
    }
    for group in groups {
        let mem: u64 = group.members.iter().filter_map(|m| costs.get(m)).map(|c| c.delta_mem).sum();
        let factor = match normalization {
            Normalization::None => 1.0,
            Normalization::Mem => mem as f64,
            Normalization::SqrtMem => (mem as f64).sqrt(),
        };
        for id in &group.members {
            let Some(&s) = scores.values.get(id) else { continue };
            if factor == 0.0 {
                return Err(Error::Prune(format!("channel {id} has zero memory cost")));
            }
            *state.running_sum.entry(*id).or_insert(0.0) += s / factor;
        }
    }
    state.count += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scorer {
    Ifso,
    GroupFisher,
    Magnitude,
    MagnitudeA,
    Random { seed: u64 },
}

impl Scorer {
    pub fn label(&self) -> &'static str {
        match self {
            Scorer::Ifso => "ifso",
            Scorer::GroupFisher => "group_fisher",
            Scorer::Magnitude => "magnitude",
            Scorer::MagnitudeA => "magnitude_a",
            Scorer::Random { .. } => "random",
        }
    }
}

/// Baseline channel scores.
///
/// - group Fisher: `Σ_n (∂L_n/∂m_i)²` over every sample of every batch,
/// - magnitude: L1 norm of the producing filter,
/// - magnitude-A: magnitude divided by the number of active filters in the layer,
/// - random: uniform draws from the seed.
pub fn baseline_scores(model: &GatedModel, method: Scorer, batches: &[Batch]) -> Result<ScoreVector> {
    let ids = model.gate_ids();
    let flat: Vec<f64> = match method {
        Scorer::Ifso => return Err(Error::Config("ifso is not a baseline scorer".into())),
        Scorer::GroupFisher => {
            let mut acc = vec![0.0; ids.len()];
            for b in batches {
                for row in model.per_sample_gate_grads(b)? {
                    acc.iter_mut().zip(&row).for_each(|(a, g)| *a += g * g);
                }
            }
            acc
        }
        Scorer::Magnitude | Scorer::MagnitudeA => ids
            .iter()
            .map(|id| {
                let p = model.params[id.layer].as_ref().expect("gated layers are linear");
                let w = p.weight.data();
                let l1 = match model.layers[id.layer] {
                    LayerSpec::Dense { outputs, .. } => w.iter().skip(id.channel).step_by(outputs).map(|x| x.abs()).sum(),
                    _ => {
                        let per = w.len() / p.weight.shape()[0];
                        w[id.channel * per..(id.channel + 1) * per].iter().map(|x| x.abs()).sum::<f64>()
                    }
                };
                if method == Scorer::MagnitudeA {
                    let active = model.gates[id.layer].as_ref().map_or(1, |g| g.iter().filter(|&&x| x != 0.0).count());
                    l1 / active.max(1) as f64
                } else {
                    l1
                }
            })
            .collect(),
        Scorer::Random { seed } => {
            let mut rng = SeededRng::new(seed);
            ids.iter().map(|_| rng.uniform()).collect()
        }
    };
    check_finite(&flat, "baseline scores")?;
    Ok(ScoreVector::from_flat(model, &flat, batches.len()))
}

/// Scores from any scorer, IFSO included.
pub fn score_model(model: &GatedModel, scorer: Scorer, batches: &[Batch], solver: &SolverChoice, fd: &FdConfig) -> Result<ScoreVector> {
    match scorer {
        Scorer::Ifso => sensitivity_scores(model, batches, solver, fd),
        other => baseline_scores(model, other, batches),
    }
}
