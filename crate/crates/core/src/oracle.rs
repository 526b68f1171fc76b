//! Ground truth for the influence estimates.
//!
//! - retraining: re-fit the surviving weights and measure the loss change,
//! - brute-force dense `∂²L/∂M∂W` and `∂²L/∂W∂W` by finite differences,
//! - a gated least-squares testbed with closed-form optima,
//! - empirical checks of the third-order error bounds on small strongly
//!   convex problems, with constants estimated on a declared grid.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{check_finite, directional_second_derivative, hessian_vector_product, FdConfig, GatedObjective, LossGrad, Role};
use crate::error::{Error, Result};
use crate::influence::{active_direction, apply_inv_hessian, check_removal, prop1_loss_change, SolverChoice, DENSE_LIMIT};
use crate::ndtensor::SeededRng;

fn guard<O: GatedObjective<f64> + ?Sized>(obj: &O, what: &'static str) -> Result<()> {
    let size = obj.num_weights() + obj.num_gates();
    if size > DENSE_LIMIT {
        return Err(Error::SizeGuard { what, size, limit: DENSE_LIMIT });
    }
    Ok(())
}

/// `G = ∂²L/∂M∂W` (`|M| × |W|`); row `j` is the central difference of `∇_W L` along gate `j`.
pub fn fd_mixed_matrix<O: GatedObjective<f64> + ?Sized>(
    obj: &O,
    weights: &[f64],
    gates: &[f64],
    fd: &FdConfig,
) -> Result<DMatrix<f64>> {
    guard(obj, "mixed matrix")?;
    let m = gates.len();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            directional_second_derivative(obj, weights, gates, Role::Weight, Role::Mask, &e, fd)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(m, weights.len(), |j, k| rows[j][k]))
}

/// Dense Hessian before symmetrization; column `j` is `H e_j`.
pub fn fd_hessian_raw<O: GatedObjective<f64> + ?Sized>(
    obj: &O,
    weights: &[f64],
    gates: &[f64],
    fd: &FdConfig,
) -> Result<DMatrix<f64>> {
    guard(obj, "hessian")?;
    let n = weights.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            hessian_vector_product(obj, weights, gates, &e, fd)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| cols[j][i]))
}

/// Symmetrized dense Hessian `∂²L/∂W∂W`.
pub fn fd_hessian<O: GatedObjective<f64> + ?Sized>(obj: &O, weights: &[f64], gates: &[f64], fd: &FdConfig) -> Result<DMatrix<f64>> {
    let raw = fd_hessian_raw(obj, weights, gates, fd)?;
    Ok((&raw + raw.transpose()) * 0.5)
}

/// `max|H − Hᵀ| / max|H|` of an unsymmetrized matrix.
pub fn symmetry_defect(raw: &DMatrix<f64>) -> f64 {
    let scale = raw.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (raw - raw.transpose()).amax() / scale
}

/// Scores rebuilt from the dense mixed matrix: `S_j = |G_j · H⁻¹ Σ_{active i} G_i|`.
///
/// Only `Identity` and `Exact` make sense here.
pub fn brute_force_scores<O: GatedObjective<f64> + ?Sized>(
    obj: &O,
    weights: &[f64],
    gates: &[f64],
    solver: &SolverChoice,
    fd: &FdConfig,
) -> Result<Vec<f64>> {
    let g = fd_mixed_matrix(obj, weights, gates, fd)?;
    let ones = DVector::from_vec(active_direction(gates));
    let gbar = g.transpose() * ones;
    let v = match solver {
        SolverChoice::Identity => gbar,
        SolverChoice::Exact => {
            let h = fd_hessian(obj, weights, gates, fd)?;
            DVector::from_vec(crate::influence::symmetric_solve(&h, gbar.as_slice())?)
        }
        SolverChoice::Neumann { .. } => {
            DVector::from_vec(apply_inv_hessian(obj, weights, gates, gbar.as_slice(), solver, fd)?)
        }
    };
    let s = g * v;
    Ok(s.iter().zip(gates).map(|(&x, &m)| if m != 0.0 { x.abs() } else { 0.0 }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    /// Stop once `‖∇_W L‖∞ ≤ tol`.
    pub tol: f64,
    pub max_epochs: usize,
    /// Step size; `None` uses `1 / L` with `L` estimated by power iteration on `H`.
    pub lr: Option<f64>,
    /// Nesterov momentum with function-value restarts.
    pub accelerated: bool,
    /// With an estimated step, re-estimate it every this many epochs (0 never does).
    pub refresh_every: usize,
    /// At each refresh, stop if the loss fell by less than this since the previous one.
    /// ReLU losses are only piecewise smooth, so the gradient test alone may never fire.
    pub plateau_tol: f64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_epochs: 5000, lr: None, accelerated: true, refresh_every: 0, plateau_tol: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainOutcome {
    pub weights: Vec<f64>,
    pub loss: f64,
    pub epochs: usize,
    pub grad_inf: f64,
    /// The gradient tolerance was met.
    pub converged: bool,
    /// Stopped on the loss-plateau test instead.
    pub plateaued: bool,
}

/// Largest Hessian eigenvalue by power iteration, padded by 10 %.
pub fn estimate_lipschitz<O: GatedObjective<f64> + ?Sized>(obj: &O, weights: &[f64], gates: &[f64], fd: &FdConfig) -> Result<f64> {
    let n = weights.len();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i * 7919) % 13) as f64 / 13.0).collect();
    let mut rayleigh = 0.0f64;
    for _ in 0..50 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let hv = hessian_vector_product(obj, weights, gates, &v, fd)?;
        rayleigh = rayleigh.max(v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>());
        v = hv;
    }
    if !(rayleigh > 0.0) {
        return Err(Error::Singular("non-positive curvature estimate".into()));
    }
    Ok(1.1 * rayleigh)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Full-batch gradient descent on the weights with the gates held fixed.
pub fn retrain<O: GatedObjective<f64> + ?Sized>(obj: &O, w0: &[f64], gates: &[f64], cfg: &RetrainConfig) -> Result<RetrainOutcome> {
    let step = |w: &[f64]| -> Result<f64> {
        match cfg.lr {
            Some(lr) => Ok(lr),
            None => Ok(1.0 / estimate_lipschitz(obj, w, gates, &FdConfig::default())?),
        }
    };
    let mut lr = step(w0)?;
    let mut x = w0.to_vec();
    let mut cur: LossGrad<f64> = obj.eval(&x, gates)?;
    let mut prev_x = x.clone();
    let mut t = 1.0f64;
    let mut last_checkpoint = cur.loss;
    for epoch in 0..cfg.max_epochs {
        let g_inf = inf_norm(&cur.grad_w);
        if g_inf <= cfg.tol {
            return Ok(RetrainOutcome { weights: x, loss: cur.loss, epochs: epoch, grad_inf: g_inf, converged: true, plateaued: false });
        }
        if epoch > 0 && cfg.refresh_every > 0 && epoch % cfg.refresh_every == 0 {
            if last_checkpoint - cur.loss < cfg.plateau_tol {
                return Ok(RetrainOutcome { weights: x, loss: cur.loss, epochs: epoch, grad_inf: g_inf, converged: false, plateaued: true });
            }
            last_checkpoint = cur.loss;
            if cfg.lr.is_none() {
                lr = step(&x)?;
                t = 1.0;
                prev_x = x.clone();
            }
        }
        let next: Vec<f64>;
        if cfg.accelerated {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            let y: Vec<f64> = x.iter().zip(&prev_x).map(|(a, b)| a + beta * (a - b)).collect();
            let gy = obj.eval(&y, gates)?;
            next = y.iter().zip(&gy.grad_w).map(|(a, g)| a - lr * g).collect();
            t = t_next;
        } else {
            next = x.iter().zip(&cur.grad_w).map(|(a, g)| a - lr * g).collect();
        }
        let ev = obj.eval(&next, gates)?;
        check_finite(&ev.grad_w, "retraining gradient")?;
        if cfg.accelerated && ev.loss > cur.loss {
            // restart momentum from a plain gradient step
            t = 1.0;
            prev_x = x.clone();
            let plain: Vec<f64> = x.iter().zip(&cur.grad_w).map(|(a, g)| a - lr * g).collect();
            let ev_plain = obj.eval(&plain, gates)?;
            x = plain;
            cur = ev_plain;
            continue;
        }
        prev_x = std::mem::replace(&mut x, next);
        cur = ev;
    }
    let g_inf = inf_norm(&cur.grad_w);
    Ok(RetrainOutcome { weights: x, loss: cur.loss, epochs: cfg.max_epochs, grad_inf: g_inf, converged: g_inf <= cfg.tol, plateaued: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthReport {
    pub delta_l_gt: f64,
    pub delta_l_ex: f64,
    pub retrain: RetrainOutcome,
}

/// `L(Ŵ*, M̂) − L(W*, M)` with `Ŵ*` obtained by retraining from `W*` under `M̂`.
pub fn true_loss_change<O: GatedObjective<f64> + ?Sized>(
    obj: &O,
    w_star: &[f64],
    mask_before: &[f64],
    mask_after: &[f64],
    cfg: &RetrainConfig,
) -> Result<TruthReport> {
    check_removal(mask_before, mask_after)?;
    let before = obj.loss(w_star, mask_before)?;
    let ex = obj.loss(w_star, mask_after)?;
    let retrain = retrain(obj, w_star, mask_after, cfg)?;
    Ok(TruthReport { delta_l_gt: retrain.loss - before, delta_l_ex: ex - before, retrain })
}

/// `L(W, M) = ½‖X diag(M) W − y‖² / n` with correlated columns of `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTestbed {
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub gates: Vec<f64>,
}

/// Builds `X` whose columns have empirical correlation exactly `rho`
/// (`XᵀX / n` has unit diagonal and `rho` elsewhere) and `y = X w + noise`.
pub fn make_quadratic_testbed(seed: u64, n: usize, d: usize, rho: f64) -> Result<QuadraticTestbed> {
    if d == 0 || d > 64 || n <= d {
        return Err(Error::Config(format!("need 1 ≤ d ≤ 64 and n > d, got n={n}, d={d}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::Config(format!("|rho| must be below 1, got {rho}")));
    }
    let mut rng = SeededRng::new(seed);
    let z = DMatrix::from_fn(n, d, |_, _| rng.standard_normal());
    let q = z.qr().q();
    let c = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
    let l = Cholesky::new(c).ok_or_else(|| Error::Singular(format!("correlation {rho} is not positive definite for d={d}")))?.l();
    let x = q * l.transpose() * (n as f64).sqrt();
    let w_true: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|k| x[(i, k)] * w_true[k]).sum::<f64>() + 0.5 * rng.standard_normal())
        .collect();
    let xs = (0..n).flat_map(|i| (0..d).map(move |k| (i, k))).map(|(i, k)| x[(i, k)]).collect();
    Ok(QuadraticTestbed { n, d, x: xs, y, gates: vec![1.0; d] })
}

impl QuadraticTestbed {
    fn col(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.x[i * self.d + k])
    }

    fn residual(&self, w: &[f64], m: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.d).map(|k| self.x[i * self.d + k] * m[k] * w[k]).sum::<f64>() - self.y[i])
            .collect()
    }

    fn xt(&self, r: &[f64]) -> Vec<f64> {
        (0..self.d).map(|k| self.col(k).zip(r).map(|(a, b)| a * b).sum::<f64>() / self.n as f64).collect()
    }

    /// `XᵀX / n`.
    pub fn gram(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |a, b| self.col(a).zip(self.col(b)).map(|(p, q)| p * q).sum::<f64>() / self.n as f64)
    }

    /// Exact `∂²L/∂W∂W = diag(M) XᵀX diag(M) / n`.
    pub fn hessian(&self, m: &[f64]) -> DMatrix<f64> {
        let g = self.gram();
        DMatrix::from_fn(self.d, self.d, |a, b| m[a] * g[(a, b)] * m[b])
    }

    /// Exact `∂²L/∂M∂W` at `(w, m)`: `G_jk = δ_jk (Xᵀr)_k / n + m_k (XᵀX)_kj w_j / n`.
    pub fn mixed_matrix(&self, w: &[f64], m: &[f64]) -> DMatrix<f64> {
        let xr = self.xt(&self.residual(w, m));
        let g = self.gram();
        DMatrix::from_fn(self.d, self.d, |j, k| if j == k { xr[k] } else { 0.0 } + m[k] * g[(k, j)] * w[j])
    }

    /// Minimizer and minimum under `m`; pruned coordinates of the minimizer are 0.
    pub fn optimum(&self, m: &[f64]) -> Result<(Vec<f64>, f64)> {
        let active: Vec<usize> = (0..self.d).filter(|&k| m[k] != 0.0).collect();
        let mut w = vec![0.0; self.d];
        if !active.is_empty() {
            let h = self.hessian(m);
            let xy = self.xt(&self.y);
            let ha = DMatrix::from_fn(active.len(), active.len(), |a, b| h[(active[a], active[b])]);
            let rhs = DVector::from_iterator(active.len(), active.iter().map(|&k| m[k] * xy[k]));
            let sol = Cholesky::new(ha).ok_or_else(|| Error::Singular("active Gram matrix is singular".into()))?.solve(&rhs);
            for (a, &k) in active.iter().enumerate() {
                w[k] = sol[a];
            }
        }
        let loss = self.loss(&w, m)?;
        Ok((w, loss))
    }

    /// Closed-form `L*(M̂) − L*(M)`.
    pub fn closed_form_delta(&self, before: &[f64], after: &[f64]) -> Result<f64> {
        Ok(self.optimum(after)?.1 - self.optimum(before)?.1)
    }
}

impl GatedObjective<f64> for QuadraticTestbed {
    fn num_weights(&self) -> usize {
        self.d
    }

    fn num_gates(&self) -> usize {
        self.d
    }

    fn eval(&self, w: &[f64], m: &[f64]) -> Result<LossGrad<f64>> {
        if w.len() != self.d || m.len() != self.d {
            return Err(Error::Shape(format!("testbed has {} weights and gates", self.d)));
        }
        let r = self.residual(w, m);
        let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>() / self.n as f64;
        let xr = self.xt(&r);
        Ok(LossGrad {
            loss,
            grad_w: (0..self.d).map(|k| m[k] * xr[k]).collect(),
            grad_m: (0..self.d).map(|k| w[k] * xr[k]).collect(),
        })
    }
}

/// One row of an oracle report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub trial: usize,
    pub delta_l_ex: f64,
    pub correction: f64,
    pub estimate: f64,
    pub delta_l_gt_true: f64,
    pub abs_err_estimate: f64,
    pub abs_err_naive: f64,
}

impl OracleRow {
    pub const HEADER: &'static str = "trial,delta_l_ex,correction,estimate,delta_l_gt_true,abs_err_estimate,abs_err_naive";

    pub fn new(trial: usize, delta_l_ex: f64, correction: f64, estimate: f64, truth: f64) -> Self {
        Self {
            trial,
            delta_l_ex,
            correction,
            estimate,
            delta_l_gt_true: truth,
            abs_err_estimate: (estimate - truth).abs(),
            abs_err_naive: (delta_l_ex - truth).abs(),
        }
    }
}

pub fn oracle_csv(rows: &[OracleRow]) -> String {
    let mut out = format!("{}\n", OracleRow::HEADER);
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.trial, r.delta_l_ex, r.correction, r.estimate, r.delta_l_gt_true, r.abs_err_estimate, r.abs_err_naive
        ));
    }
    out
}

/// Every single-gate prune of a testbed: estimate (with `solver`), retrained truth and closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPrune {
    pub gate: usize,
    pub estimate: f64,
    pub delta_l_ex: f64,
    pub correction: f64,
    pub retrained: f64,
    pub closed_form: f64,
}

pub fn quadratic_single_prunes(
    bed: &QuadraticTestbed,
    solver: &SolverChoice,
    fd: &FdConfig,
    retrain_cfg: &RetrainConfig,
) -> Result<Vec<QuadraticPrune>> {
    let (w_star, _) = bed.optimum(&bed.gates)?;
    (0..bed.d)
        .map(|j| {
            let mut after = bed.gates.clone();
            after[j] = 0.0;
            let r = prop1_loss_change(bed, &w_star, &bed.gates, &after, solver, fd)?;
            let truth = true_loss_change(bed, &w_star, &bed.gates, &after, retrain_cfg)?;
            Ok(QuadraticPrune {
                gate: j,
                estimate: r.estimate,
                delta_l_ex: r.delta_l_ex,
                correction: r.correction,
                retrained: truth.delta_l_gt,
                closed_form: bed.closed_form_delta(&bed.gates, &after)?,
            })
        })
        .collect()
}

/// Constants of the error bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Strong convexity in `W` over the region.
    pub lambda: f64,
    /// Lipschitz constant of the Hessian in `W`.
    pub c_h: f64,
    /// Bound on `‖∂L(W*, M̂)/∂W‖` over the admissible masks.
    pub c_l: f64,
    /// Lipschitz constant of `∇_W L` in `M` over the region.
    pub c_big_l: f64,
    /// Bound on `‖∂²L(W*, M)/∂M∂W‖` over the admissible masks.
    pub c_a: f64,
    /// Smallest Hessian eigenvalue at `W*` over the admissible masks.
    pub sigma_min: f64,
    pub max_third: f64,
}

impl BoundConstants {
    /// Radius bound `C_l/λ + C_H C_l² / (2 σ_min² λ)`.
    pub fn corollary1_radius(&self) -> f64 {
        self.c_l / self.lambda + self.c_h * self.c_l * self.c_l / (2.0 * self.sigma_min * self.sigma_min * self.lambda)
    }

    /// Radius bound `C_L/λ ‖ΔM‖ + C_H C_a² / (2 σ_min² λ) ‖ΔM‖²`.
    pub fn corollary2_radius(&self, dm: f64) -> f64 {
        self.c_big_l / self.lambda * dm
            + self.c_h * self.c_a * self.c_a / (2.0 * self.sigma_min * self.sigma_min * self.lambda) * dm * dm
    }

    pub fn error_bound(&self, radius: f64) -> f64 {
        radius.powi(3) / 6.0 * self.max_third
    }
}

/// `L(w, m) = mean softplus(−y x m w) + μ w² / 2` with one weight and one gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logistic1d {
    /// Products `y_i x_i`.
    pub a: Vec<f64>,
    pub mu: f64,
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

impl Logistic1d {
    /// Noisy labels so the optimum is interior; `mu` in `[0.05, 0.5)`.
    pub fn generate(seed: u64, n: usize) -> Self {
        let mut rng = SeededRng::new(seed);
        let w_true = 0.5 + 1.5 * rng.uniform();
        let mu = 0.05 + 0.45 * rng.uniform();
        let a = (0..n)
            .map(|_| {
                let x = rng.standard_normal();
                let y = if x * w_true + rng.standard_normal() >= 0.0 { 1.0 } else { -1.0 };
                y * x
            })
            .collect();
        Self { a, mu }
    }

    fn mean(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.a.iter().map(|&a| f(a)).sum::<f64>() / self.a.len() as f64
    }

    pub fn loss(&self, w: f64, m: f64) -> f64 {
        self.mean(|a| softplus(-a * m * w)) + 0.5 * self.mu * w * w
    }

    pub fn d_w(&self, w: f64, m: f64) -> f64 {
        self.mean(|a| -a * m * sigmoid(-a * m * w)) + self.mu * w
    }

    pub fn d_ww(&self, w: f64, m: f64) -> f64 {
        self.mean(|a| {
            let s = sigmoid(-a * m * w);
            (a * m).powi(2) * s * (1.0 - s)
        }) + self.mu
    }

    pub fn d_www(&self, w: f64, m: f64) -> f64 {
        self.mean(|a| {
            let s = sigmoid(-a * m * w);
            -(a * m).powi(3) * s * (1.0 - s) * (1.0 - 2.0 * s)
        })
    }

    pub fn d_wm(&self, w: f64, m: f64) -> f64 {
        self.mean(|a| {
            let s = sigmoid(-a * m * w);
            -a * s + a * a * m * w * s * (1.0 - s)
        })
    }

    /// Newton iteration to machine precision.
    pub fn argmin(&self, m: f64, start: f64) -> f64 {
        let mut w = start;
        for _ in 0..100 {
            let step = self.d_w(w, m) / self.d_ww(w, m);
            w -= step;
            if step.abs() <= 1e-15 * (1.0 + w.abs()) {
                break;
            }
        }
        w
    }
}

/// Grid used to estimate bound constants: `w ∈ [w* − radius, w* + radius]`, `m ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub w_points: usize,
    pub m_points: usize,
    pub radius: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { w_points: 201, m_points: 101, radius: 2.0 }
    }
}

/// Constants for a 1-D logistic problem, maximized / minimized over `grid`.
pub fn estimate_logistic_constants(p: &Logistic1d, grid: &GridSpec) -> (BoundConstants, f64) {
    let w_star = p.argmin(1.0, 0.0);
    let ws: Vec<f64> = (0..grid.w_points)
        .map(|i| w_star - grid.radius + 2.0 * grid.radius * i as f64 / (grid.w_points - 1) as f64)
        .collect();
    let ms: Vec<f64> = (0..grid.m_points).map(|j| j as f64 / (grid.m_points - 1) as f64).collect();
    let mut k = BoundConstants {
        lambda: f64::INFINITY,
        c_h: 0.0,
        c_l: 0.0,
        c_big_l: 0.0,
        c_a: 0.0,
        sigma_min: f64::INFINITY,
        max_third: 0.0,
    };
    for &m in &ms {
        for &w in &ws {
            k.lambda = k.lambda.min(p.d_ww(w, m));
            k.c_h = k.c_h.max(p.d_www(w, m).abs());
            k.c_big_l = k.c_big_l.max(p.d_wm(w, m).abs());
        }
        k.c_l = k.c_l.max(p.d_w(w_star, m).abs());
        k.c_a = k.c_a.max(p.d_wm(w_star, m).abs());
        k.sigma_min = k.sigma_min.min(p.d_ww(w_star, m));
    }
    k.max_third = k.c_h;
    (k, w_star)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta_m: f64,
    pub empirical_error: f64,
    pub corollary1_bound: f64,
    pub corollary2_bound: f64,
    /// Empirical error within both bounds (plus the numerical tolerance).
    pub holds: bool,
}

/// Bound check of the 1-D logistic problem for gate reductions `m̂ = 1 − δ`.
///
/// The estimate uses the exact second derivative. `tol` absorbs rounding.
pub fn bound_check_logistic(p: &Logistic1d, deltas: &[f64], grid: &GridSpec, tol: f64) -> Result<Vec<BoundReport>> {
    let (k, w_star) = estimate_logistic_constants(p, grid);
    let base = p.loss(w_star, 1.0);
    deltas
        .iter()
        .map(|&dm| {
            let m_hat = 1.0 - dm;
            let w_hat = p.argmin(m_hat, w_star);
            if (w_hat - w_star).abs() > grid.radius {
                return Err(Error::Config(format!("grid radius {} does not contain the optimum for ΔM={dm}", grid.radius)));
            }
            let truth = p.loss(w_hat, m_hat) - base;
            let g = p.d_w(w_star, m_hat);
            let estimate = p.loss(w_star, m_hat) - base - 0.5 * g * g / p.d_ww(w_star, m_hat);
            let err = (estimate - truth).abs();
            let b1 = k.error_bound(k.corollary1_radius());
            let b2 = k.error_bound(k.corollary2_radius(dm));
            Ok(BoundReport { delta_m: dm, empirical_error: err, corollary1_bound: b1, corollary2_bound: b2, holds: err <= b1 + tol && err <= b2 + tol })
        })
        .collect()
}

/// Bound check on a quadratic testbed for every single-gate prune. The third
/// derivative vanishes, so both bounds are 0 and the exact-solve estimate must
/// match the closed form to `tol`.
pub fn bound_check_quadratic(bed: &QuadraticTestbed, fd: &FdConfig, tol: f64) -> Result<Vec<BoundReport>> {
    let (w_star, _) = bed.optimum(&bed.gates)?;
    (0..bed.d)
        .map(|j| {
            let mut after = bed.gates.clone();
            after[j] = 0.0;
            let r = prop1_loss_change(bed, &w_star, &bed.gates, &after, &SolverChoice::Exact, fd)?;
            let truth = bed.closed_form_delta(&bed.gates, &after)?;
            let err = (r.estimate - truth).abs();
            Ok(BoundReport { delta_m: 1.0, empirical_error: err, corollary1_bound: 0.0, corollary2_bound: 0.0, holds: err <= tol })
        })
        .collect()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(h.clone()).eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}
