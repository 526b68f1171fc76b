//! Oracle suites: quadratic exactness, score cross-checks, error bounds and
//! the loss-change sweep over pruned fractions.

use std::fmt::Write as _;
use std::path::Path;

use ifso::autograd::{FdConfig, GatedObjective};
use ifso::costmodel::{model_flops, trace_couplings};
use ifso::influence::{prop1_loss_change, sensitivity_raw, sensitivity_scores, ProxyObjective, SolverChoice};
use ifso::ndtensor::SeededRng;
use ifso::net::{build_model, evaluate, train, Batch, Dataset, GatedModel};
use ifso::oracle::{
    bound_check_logistic, bound_check_quadratic, brute_force_scores, make_quadratic_testbed, oracle_csv,
    quadratic_single_prunes, retrain, true_loss_change, BoundReport, GridSpec, Logistic1d, OracleRow, RetrainConfig,
};
use ifso::pruner::{prune_oneshot, PruneConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiment::{pretrain, Splits};
use crate::{write_file, LabError, StageExt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Prop1,
    Scores,
    Bounds,
    Fig1Sweep,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Prop1 => "prop1",
            Suite::Scores => "scores",
            Suite::Bounds => "bounds",
            Suite::Fig1Sweep => "fig1-sweep",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, LabError> {
        match s {
            "prop1" => Ok(Suite::Prop1),
            "scores" => Ok(Suite::Scores),
            "bounds" => Ok(Suite::Bounds),
            "fig1-sweep" => Ok(Suite::Fig1Sweep),
            _ => Err(LabError::Invalid(format!("unknown suite `{s}` (expected prop1, scores, bounds or fig1-sweep)"))),
        }
    }
}

/// Quadratic testbeds of the prop1 and bounds suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticSuite {
    pub instances: usize,
    pub n: usize,
    pub dims: Vec<usize>,
    pub rhos: Vec<f64>,
}

impl Default for QuadraticSuite {
    fn default() -> Self {
        Self { instances: 20, n: 64, dims: vec![4, 8, 16], rhos: vec![0.0, 0.5, 0.9] }
    }
}

impl QuadraticSuite {
    /// `(seed, d, ρ)` of instance `i`, cycling through the dimension and correlation lists.
    pub fn instance(&self, seed: u64, i: usize) -> (u64, usize, f64) {
        let d = self.dims[i % self.dims.len()];
        let rho = self.rhos[(i / self.dims.len()) % self.rhos.len()];
        (seed.wrapping_mul(1000).wrapping_add(i as u64), d, rho)
    }

    fn validate(&self) -> Result<(), LabError> {
        if self.instances == 0 || self.dims.is_empty() || self.rhos.is_empty() {
            return Err(LabError::Invalid("quadratic suite needs instances, dims and rhos".into()));
        }
        if self.dims.iter().any(|&d| d == 0 || d > 64 || d >= self.n) {
            return Err(LabError::Invalid(format!("quadratic dims must be in 1..=64 and below n = {}", self.n)));
        }
        if self.rhos.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(LabError::Invalid("quadratic rhos must satisfy |ρ| < 1".into()));
        }
        Ok(())
    }
}

/// One CSV row per single-gate prune over all instances.
pub fn prop1_suite(q: &QuadraticSuite, seed: u64, fd: &FdConfig) -> Result<Vec<OracleRow>, LabError> {
    q.validate()?;
    let per_instance: Vec<Vec<(f64, f64, f64, f64)>> = (0..q.instances)
        .into_par_iter()
        .map(|i| {
            let (s, d, rho) = q.instance(seed, i);
            let bed = make_quadratic_testbed(s, q.n, d, rho)?;
            let prunes = quadratic_single_prunes(&bed, &SolverChoice::Exact, fd, &RetrainConfig::default())?;
            Ok(prunes.iter().map(|p| (p.delta_l_ex, p.correction, p.estimate, p.closed_form)).collect())
        })
        .collect::<Result<_, ifso::Error>>()?;
    Ok(per_instance
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(trial, (ex, corr, est, truth))| OracleRow::new(trial, ex, corr, est, truth))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSuite {
    pub logistic_instances: usize,
    pub logistic_samples: usize,
    pub deltas: Vec<f64>,
    pub grid: GridSpec,
    pub quadratic: QuadraticSuite,
    /// Slack for round-off in the logistic comparison.
    pub logistic_tol: f64,
    pub quadratic_tol: f64,
}

impl Default for BoundsSuite {
    fn default() -> Self {
        Self {
            logistic_instances: 100,
            logistic_samples: 40,
            deltas: vec![0.0125, 0.025, 0.05, 0.1],
            grid: GridSpec::default(),
            quadratic: QuadraticSuite::default(),
            logistic_tol: 1e-12,
            quadratic_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub problem: &'static str,
    pub instance: usize,
    pub report: BoundReport,
}

pub const BOUNDS_HEADER: &str = "problem,instance,delta_m,empirical_error,corollary1_bound,corollary2_bound,holds";

pub fn bounds_csv(rows: &[BoundRow]) -> String {
    let mut out = format!("{BOUNDS_HEADER}\n");
    for r in rows {
        let b = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.problem, r.instance, b.delta_m, b.empirical_error, b.corollary1_bound, b.corollary2_bound, b.holds
        );
    }
    out
}

pub fn bounds_suite(cfg: &BoundsSuite, seed: u64, fd: &FdConfig) -> Result<Vec<BoundRow>, LabError> {
    cfg.quadratic.validate()?;
    let logistic: Vec<Vec<BoundReport>> = (0..cfg.logistic_instances)
        .into_par_iter()
        .map(|i| {
            let p = Logistic1d::generate(seed.wrapping_mul(1000).wrapping_add(i as u64), cfg.logistic_samples);
            bound_check_logistic(&p, &cfg.deltas, &cfg.grid, cfg.logistic_tol)
        })
        .collect::<Result<_, ifso::Error>>()?;
    let quadratic: Vec<Vec<BoundReport>> = (0..cfg.quadratic.instances)
        .into_par_iter()
        .map(|i| {
            let (s, d, rho) = cfg.quadratic.instance(seed, i);
            bound_check_quadratic(&make_quadratic_testbed(s, cfg.quadratic.n, d, rho)?, fd, cfg.quadratic_tol)
        })
        .collect::<Result<_, ifso::Error>>()?;
    let mut rows = Vec::new();
    for (problem, all) in [("logistic", logistic), ("quadratic", quadratic)] {
        for (instance, reports) in all.into_iter().enumerate() {
            rows.extend(reports.into_iter().map(|report| BoundRow { problem, instance, report }));
        }
    }
    Ok(rows)
}

/// Two-pass scores against the brute-force mixed-matrix construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCheck {
    pub two_pass: Vec<f64>,
    pub brute_force: Vec<f64>,
    /// Denominator floor of the relative errors.
    pub floor: f64,
    pub max_rel_err: f64,
    pub argsort_equal: bool,
}

pub const SCORES_HEADER: &str = "gate,two_pass,brute_force,rel_err";

impl ScoreCheck {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCORES_HEADER}\n");
        for (j, (a, b)) in self.two_pass.iter().zip(&self.brute_force).enumerate() {
            let _ = writeln!(out, "{j},{a},{b},{}", rel_err(*a, *b, self.floor));
        }
        out
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Stable ascending argsort; ties keep index order.
pub fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

pub fn score_check(model: &GatedModel, batch: &Batch, solver: &SolverChoice, fd: &FdConfig) -> Result<ScoreCheck, LabError> {
    let batches = std::slice::from_ref(batch);
    let obj = ProxyObjective::new(model, batches);
    let w = model.weights_flat();
    let m = model.gates_flat();
    let two_pass = sensitivity_raw(&obj, &w, &m, solver, fd)?;
    let brute_force = brute_force_scores(&obj, &w, &m, solver, fd)?;
    // scores this far below the largest are finite-difference round-off in both routes
    let floor = SCORE_FLOOR * brute_force.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_rel_err = two_pass.iter().zip(&brute_force).map(|(a, b)| rel_err(*a, *b, floor)).fold(0.0, f64::max);
    let argsort_equal = argsort(&two_pass) == argsort(&brute_force);
    Ok(ScoreCheck { two_pass, brute_force, floor, max_rel_err, argsort_equal })
}

/// Settings of the loss-change sweep on a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    /// FLOPs-removed fractions of the sweep rows.
    pub fractions: Vec<f64>,
    /// Random single-channel prunes compared against retraining.
    pub single_prunes: usize,
    /// Weight decay in the objective; keeps the retraining problem well posed.
    pub l2: f64,
    /// Polishing of the pretrained weights before any prune.
    pub converge: RetrainConfig,
    /// Retraining budget of every ground-truth loss change.
    pub retrain: RetrainConfig,
    pub solver: SolverChoice,
    pub fd: FdConfig,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            fractions: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            single_prunes: 50,
            l2: 1e-2,
            converge: RetrainConfig { tol: 1e-8, max_epochs: 20_000, refresh_every: 1500, plateau_tol: 1e-10, ..RetrainConfig::default() },
            retrain: RetrainConfig { tol: 1e-8, max_epochs: 5000, refresh_every: 500, plateau_tol: 1e-7, ..RetrainConfig::default() },
            solver: SolverChoice::Identity,
            fd: FdConfig::default(),
        }
    }
}

impl Fig1Config {
    pub fn validate(&self) -> Result<(), LabError> {
        if self.fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(LabError::Invalid("fig1 fractions must lie in [0, 1)".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(LabError::Invalid("fig1 l2 must be non-negative".into()));
        }
        self.solver.validate()?;
        self.fd.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Row {
    pub fraction: f64,
    pub flops_frac: f64,
    pub delta_l_ex: f64,
    pub estimate: f64,
    pub delta_l_gt_true: f64,
    pub acc_old: f64,
    pub acc_retrained: f64,
}

pub const FIG1_HEADER: &str = "fraction,flops_frac,delta_l_ex,estimate,delta_l_gt_true,acc_old,acc_retrained";

pub fn fig1_csv(rows: &[Fig1Row]) -> String {
    let mut out = format!("{FIG1_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.fraction, r.flops_frac, r.delta_l_ex, r.estimate, r.delta_l_gt_true, r.acc_old, r.acc_retrained
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Outcome {
    pub rows: Vec<Fig1Row>,
    /// Random single-channel prunes in the oracle CSV layout.
    pub singles: Vec<OracleRow>,
    /// `‖∇_W L‖∞` of the trained point the sweep starts from.
    pub start_grad_inf: f64,
}

/// Drives the weights to a stationary point of the regularized full-batch loss.
pub fn converge(model: &mut GatedModel, data: &Dataset, l2: f64, cfg: &RetrainConfig) -> Result<f64, LabError> {
    let batch = [data.full_batch()];
    let obj = ProxyObjective { model, batches: &batch, l2 };
    let out = retrain(&obj, &model.weights_flat(), &model.gates_flat(), cfg)?;
    model.set_weights_flat(&out.weights)?;
    Ok(out.grad_inf)
}

fn with_weights(model: &GatedModel, w: &[f64], gates: &[f64]) -> Result<GatedModel, LabError> {
    let mut m = model.clone();
    m.set_weights_flat(w)?;
    m.set_gates_flat(gates)?;
    Ok(m)
}

/// Loss changes of score-ranked prunes at each fraction plus random single-channel prunes.
///
/// `model` should already be near a stationary point of the objective (see [`converge`]);
/// scores come from `score_data`, losses are measured on `loss_data`.
pub fn fig1_sweep(
    model: &GatedModel,
    score_data: &Dataset,
    loss_data: &Dataset,
    cfg: &Fig1Config,
    seed: u64,
) -> Result<Fig1Outcome, LabError> {
    cfg.validate()?;
    let batch = [loss_data.full_batch()];
    let obj = ProxyObjective { model, batches: &batch, l2: cfg.l2 };
    let w = model.weights_flat();
    let m0 = model.gates_flat();
    let start_grad_inf = obj.eval(&w, &m0)?.grad_w.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let flops0 = model_flops(model, true)? as f64;

    let masks: Vec<(f64, Vec<f64>)> = cfg
        .fractions
        .iter()
        .map(|&fraction| {
            let prune_cfg = PruneConfig {
                target_flops_reduction: fraction,
                k_accumulate: 1,
                score_batches: 1,
                score_batch_size: score_data.len(),
                step_lr: 0.0,
                solver: cfg.solver.clone(),
                fd: cfg.fd,
                seed,
                ..PruneConfig::default()
            };
            let out = prune_oneshot(model, score_data, &prune_cfg)?;
            Ok((fraction, out.masked.gates_flat()))
        })
        .collect::<Result<_, LabError>>()?;

    let rows: Vec<Fig1Row> = masks
        .par_iter()
        .map(|(fraction, mask)| {
            let est = prop1_loss_change(&obj, &w, &m0, mask, &cfg.solver, &cfg.fd)?;
            let truth = true_loss_change(&obj, &w, &m0, mask, &cfg.retrain)?;
            let old = with_weights(model, &w, mask)?;
            let new = with_weights(model, &truth.retrain.weights, mask)?;
            Ok(Fig1Row {
                fraction: *fraction,
                flops_frac: model_flops(&old, true)? as f64 / flops0,
                delta_l_ex: est.delta_l_ex,
                estimate: est.estimate,
                delta_l_gt_true: truth.delta_l_gt,
                acc_old: evaluate(&old, loss_data)?.1,
                acc_retrained: evaluate(&new, loss_data)?.1,
            })
        })
        .collect::<Result<_, LabError>>()?;

    // random coupling groups without replacement; for plain MLPs these are single channels
    let groups = trace_couplings(model)?;
    let ids = model.gate_ids();
    let mut rng = SeededRng::new(seed).split(0xF161);
    let order = rng.permutation(groups.len());
    let singles: Vec<OracleRow> = (0..cfg.single_prunes)
        .into_par_iter()
        .map(|trial| {
            let group = &groups[order[trial % order.len()]];
            let mut mask = m0.clone();
            for (j, id) in ids.iter().enumerate() {
                if group.members.contains(id) {
                    mask[j] = 0.0;
                }
            }
            let est = prop1_loss_change(&obj, &w, &m0, &mask, &cfg.solver, &cfg.fd)?;
            let truth = true_loss_change(&obj, &w, &m0, &mask, &cfg.retrain)?;
            Ok(OracleRow::new(trial, est.delta_l_ex, est.correction, est.estimate, truth.delta_l_gt))
        })
        .collect::<Result<_, LabError>>()?;
    Ok(Fig1Outcome { rows, singles, start_grad_inf })
}

/// Outcome of one `verify` suite run.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub suite: Suite,
    /// Files written into the output directory.
    pub files: Vec<String>,
    pub passed: bool,
    pub summary: String,
}

/// Runs one suite with the settings in `cfg.verify` and writes its CSVs into `out`.
pub fn run_suite(cfg: &ExperimentConfig, suite: Suite, out: &Path) -> Result<SuiteResult, LabError> {
    cfg.validate()?;
    write_file(out, "config.json", cfg.canonical_json()?)?;
    let v = &cfg.verify;
    let fd = cfg.prune.fd;
    let (files, passed, summary) = match suite {
        Suite::Prop1 => {
            let rows = prop1_suite(&v.quadratic, cfg.seed, &fd).stage("prop1")?;
            write_file(out, "prop1_report.csv", oracle_csv(&rows))?;
            let worst = rows.iter().map(|r| r.abs_err_estimate).fold(0.0, f64::max);
            (vec!["prop1_report.csv"], worst <= PROP1_TOL, format!("{} prunes, max |estimate - truth| = {worst:e}", rows.len()))
        }
        Suite::Scores => {
            let splits = Splits::generate(cfg)?;
            let mut model = build_model(&v.score_arch, cfg.seed).stage("model")?;
            train(&mut model, &splits.train, &cfg.pretrain).stage("pretrain")?;
            let mut rng = SeededRng::new(cfg.seed).split(0x5C0);
            let batch = splits.train.random_batches(1, v.score_batch_size, &mut rng)?.remove(0);
            let check = score_check(&model, &batch, &SolverChoice::Identity, &fd).stage("scores")?;
            write_file(out, "scores_report.csv", check.to_csv())?;
            let ok = check.max_rel_err <= SCORES_TOL && check.argsort_equal;
            (
                vec!["scores_report.csv"],
                ok,
                format!("max rel err {:e}, argsort equal: {}", check.max_rel_err, check.argsort_equal),
            )
        }
        Suite::Bounds => {
            let rows = bounds_suite(&v.bounds, cfg.seed, &fd).stage("bounds")?;
            write_file(out, "bounds_report.csv", bounds_csv(&rows))?;
            let violations = rows.iter().filter(|r| !r.report.holds).count();
            (vec!["bounds_report.csv"], violations == 0, format!("{} checks, {violations} violations", rows.len()))
        }
        Suite::Fig1Sweep => {
            let splits = Splits::generate(cfg)?;
            let (mut model, _) = pretrain(cfg, &splits)?;
            let grad = converge(&mut model, &splits.train, v.fig1.l2, &v.fig1.converge).stage("converge")?;
            let outcome = fig1_sweep(&model, &splits.train, splits.eval(cfg.loss_split), &v.fig1, cfg.seed).stage("fig1-sweep")?;
            write_file(out, "fig1_sweep.csv", fig1_csv(&outcome.rows))?;
            write_file(out, "fig1_singles.csv", oracle_csv(&outcome.singles))?;
            let est = mean_abs(outcome.singles.iter().map(|r| r.abs_err_estimate));
            let naive = mean_abs(outcome.singles.iter().map(|r| r.abs_err_naive));
            (
                vec!["fig1_sweep.csv", "fig1_singles.csv"],
                true,
                format!("start |grad|inf = {grad:e}; single prunes: MAE estimate {est:e}, MAE naive {naive:e}"),
            )
        }
    };
    Ok(SuiteResult { suite, files: files.into_iter().map(String::from).collect(), passed, summary })
}

/// Pass threshold of the quadratic exactness suite.
pub const PROP1_TOL: f64 = 1e-8;
/// Pass threshold of the per-channel score cross-check.
pub const SCORES_TOL: f64 = 1e-3;
/// Relative errors are taken against at least this fraction of the largest score.
pub const SCORE_FLOOR: f64 = 1e-6;

pub fn mean_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v.abs();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `channel,score` table of the two-pass scores on one batch.
pub fn sensitivity_table(model: &GatedModel, batch: &Batch, solver: &SolverChoice, fd: &FdConfig) -> Result<String, LabError> {
    let s = sensitivity_scores(model, std::slice::from_ref(batch), solver, fd)?;
    let mut out = String::from("channel,score\n");
    for (c, v) in &s.values {
        let _ = writeln!(out, "{c},{v}");
    }
    Ok(out)
}
