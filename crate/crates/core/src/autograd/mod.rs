//! Reverse-mode differentiation and finite-difference second derivatives.
//!
//! First-order gradients are exact (one reverse sweep over a [`Tape`]).
//! Every second-order quantity used by the influence machinery, the
//! Hessian-vector product `H·v` as well as the mixed products
//! `∂²L/∂M∂W · d`, is a central difference of those exact gradients along a
//! direction. On a quadratic loss the difference is exact up to rounding.

mod tape;

pub use tape::{Gradients, LeafId, Role, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::Scalar;

/// Loss and both gradients of a gated objective at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad_w: Vec<T>,
    pub grad_m: Vec<T>,
}

impl<T: Scalar> LossGrad<T> {
    pub fn grad(&self, role: Role) -> &[T] {
        match role {
            Role::Weight => &self.grad_w,
            Role::Mask => &self.grad_m,
        }
    }
}

/// A loss `L(W, M)` over flat weight and gate vectors, with exact first derivatives.
pub trait GatedObjective<T: Scalar>: Sync {
    fn num_weights(&self) -> usize;
    fn num_gates(&self) -> usize;
    fn eval(&self, weights: &[T], gates: &[T]) -> Result<LossGrad<T>>;

    fn loss(&self, weights: &[T], gates: &[T]) -> Result<T> {
        Ok(self.eval(weights, gates)?.loss)
    }
}

impl<T: Scalar, O: GatedObjective<T> + ?Sized> GatedObjective<T> for &O {
    fn num_weights(&self) -> usize {
        (**self).num_weights()
    }
    fn num_gates(&self) -> usize {
        (**self).num_gates()
    }
    fn eval(&self, weights: &[T], gates: &[T]) -> Result<LossGrad<T>> {
        (**self).eval(weights, gates)
    }
}

/// `c · L(W, M)`. Used to check that rankings survive loss rescaling.
pub struct ScaledObjective<O> {
    pub inner: O,
    pub factor: f64,
}

impl<T: Scalar, O: GatedObjective<T>> GatedObjective<T> for ScaledObjective<O> {
    fn num_weights(&self) -> usize {
        self.inner.num_weights()
    }
    fn num_gates(&self) -> usize {
        self.inner.num_gates()
    }
    fn eval(&self, weights: &[T], gates: &[T]) -> Result<LossGrad<T>> {
        let c = T::lit(self.factor);
        let lg = self.inner.eval(weights, gates)?;
        Ok(LossGrad {
            loss: lg.loss * c,
            grad_w: lg.grad_w.into_iter().map(|g| g * c).collect(),
            grad_m: lg.grad_m.into_iter().map(|g| g * c).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    #[default]
    Central,
}

/// Step control for finite differences of gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub eps_base: f64,
    #[serde(default)]
    pub scheme: FdScheme,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { eps_base: 1e-4, scheme: FdScheme::Central }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_base > 0.0 && self.eps_base.is_finite()) {
            return Err(Error::Config(format!("eps_base must be positive, got {}", self.eps_base)));
        }
        Ok(())
    }
}

pub(crate) fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what.to_string()))
    }
}

/// Central difference of `∇_{grad_of} L` along `direction` applied to the `perturb` leaf.
///
/// Returns `[∇L(p + εd) − ∇L(p − εd)] / (2ε)`, i.e. `∂²L/∂(grad_of)∂(perturb) · d`.
/// The step is `ε = eps_base / ‖d‖∞`, so the perturbation always has
/// ∞-norm `eps_base` whatever the scale of `d`. A zero direction gives zeros.
#[allow(clippy::too_many_arguments)]
pub fn directional_second_derivative<T: Scalar, O: GatedObjective<T> + ?Sized>(
    objective: &O,
    weights: &[T],
    gates: &[T],
    grad_of: Role,
    perturb: Role,
    direction: &[T],
    fd: &FdConfig,
) -> Result<Vec<T>> {
    fd.validate()?;
    let base = match perturb {
        Role::Weight => weights,
        Role::Mask => gates,
    };
    if direction.len() != base.len() {
        return Err(Error::Shape(format!(
            "direction has {} entries, {perturb:?} leaf has {}",
            direction.len(),
            base.len()
        )));
    }
    check_finite(direction, "fd direction")?;
    let out_len = match grad_of {
        Role::Weight => objective.num_weights(),
        Role::Mask => objective.num_gates(),
    };
    let dmax = direction.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
    if dmax == T::zero() {
        return Ok(vec![T::zero(); out_len]);
    }
    let eps = T::lit(fd.eps_base) / dmax;
    let shifted = |sign: T| -> Vec<T> { base.iter().zip(direction).map(|(&b, &d)| b + sign * eps * d).collect() };
    let plus = shifted(T::one());
    let minus = shifted(-T::one());
    let (gp, gm) = match perturb {
        Role::Weight => (objective.eval(&plus, gates)?, objective.eval(&minus, gates)?),
        Role::Mask => (objective.eval(weights, &plus)?, objective.eval(weights, &minus)?),
    };
    let two_eps = eps + eps;
    let out: Vec<T> = gp.grad(grad_of).iter().zip(gm.grad(grad_of)).map(|(&a, &b)| (a - b) / two_eps).collect();
    check_finite(&out, "directional second derivative")?;
    Ok(out)
}

/// Hessian-vector product `∂²L/∂W∂W · v`.
pub fn hessian_vector_product<T: Scalar, O: GatedObjective<T> + ?Sized>(
    objective: &O,
    weights: &[T],
    gates: &[T],
    v: &[T],
    fd: &FdConfig,
) -> Result<Vec<T>> {
    directional_second_derivative(objective, weights, gates, Role::Weight, Role::Weight, v, fd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{SeededRng, Tensor};

    /// `½ wᵀ A w + Σ_j m_j (b_j · w)`, evaluated through the tape.
    struct TapeQuadratic {
        a: Tensor<f64>,
        b: Tensor<f64>,
    }

    impl GatedObjective<f64> for TapeQuadratic {
        fn num_weights(&self) -> usize {
            self.a.shape()[0]
        }
        fn num_gates(&self) -> usize {
            self.b.shape()[0]
        }
        fn eval(&self, w: &[f64], m: &[f64]) -> Result<LossGrad<f64>> {
            let d = self.num_weights();
            let mut tape = Tape::new();
            let wv = tape.leaf(Tensor::new(vec![d, 1], w.to_vec())?, Role::Weight);
            let mv = tape.leaf(Tensor::new(vec![1, m.len()], m.to_vec())?, Role::Mask);
            let a = tape.constant(self.a.clone());
            let b = tape.constant(self.b.clone());
            let aw = tape.matmul(a, wv)?;
            let quad = {
                let prod = tape.mul(wv, aw)?;
                let s = tape.sum(prod);
                tape.scale(s, 0.5)
            };
            let bw = tape.matmul(b, wv)?;
            let mbw = tape.matmul(mv, bw)?;
            let lin = tape.sum(mbw);
            let loss = tape.add(quad, lin)?;
            let g = tape.backward(loss)?;
            Ok(LossGrad {
                loss: tape.value(loss).item()?,
                grad_w: g.wrt(wv).into_data(),
                grad_m: g.wrt(mv).into_data(),
            })
        }
    }

    fn spd(rng: &mut SeededRng, d: usize) -> Tensor<f64> {
        let r = rng.normal(&[d, d], 0.0, 1.0);
        let mut a = r.transpose().unwrap().matmul(&r).unwrap();
        for i in 0..d {
            a.data_mut()[i * d + i] += 1.0;
        }
        a
    }

    #[test]
    fn simple_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), Role::Weight);
        let s = tape.sum(w);
        assert_eq!(tape.backward(s).unwrap().wrt(w).data(), &[1.0; 3]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), Role::Weight);
        let sq = tape.square(w);
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        assert_eq!(tape.backward(half).unwrap().wrt(w).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient_and_non_scalar_fails() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), Role::Weight);
        let m = tape.leaf(Tensor::from_vec(vec![5.0]), Role::Mask);
        let s = tape.sum(w);
        let grads = tape.leaf_gradients(s).unwrap();
        assert_eq!(grads[1].0.role, Role::Mask);
        assert_eq!(grads[1].1.data(), &[0.0]);
        assert!(tape.backward(w).is_err());
        let _ = m;
    }

    #[test]
    fn softmax_xent_uniform_logits_is_ln_c() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(&[4, 5]), Role::Weight);
        let l = tape.softmax_cross_entropy(z, &[0, 1, 2, 3]).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hvp_on_quadratic_is_exact() {
        let mut rng = SeededRng::new(2);
        let a = spd(&mut rng, 5);
        let obj = TapeQuadratic { a: a.clone(), b: rng.normal(&[3, 5], 0.0, 1.0) };
        let w = rng.normal(&[5], 0.0, 1.0).into_data();
        let m = vec![1.0; 3];
        let v = rng.normal(&[5], 0.0, 1.0);
        let hv = hessian_vector_product(&obj, &w, &m, v.data(), &FdConfig::default()).unwrap();
        let exact = a.matmul(&v.reshape(&[5, 1]).unwrap()).unwrap();
        for (x, y) in hv.iter().zip(exact.data()) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn mixed_derivative_on_quadratic_and_mask_free_loss() {
        let mut rng = SeededRng::new(8);
        let b = rng.normal(&[3, 4], 0.0, 1.0);
        let obj = TapeQuadratic { a: spd(&mut rng, 4), b: b.clone() };
        let w = rng.normal(&[4], 0.0, 1.0).into_data();
        let m = vec![1.0, 0.5, 0.0];
        let d = vec![1.0, -2.0, 0.5];
        // ∂/∂M of ∇_W L = Bᵀ, so the product is Bᵀ d.
        let got = directional_second_derivative(&obj, &w, &m, Role::Weight, Role::Mask, &d, &FdConfig::default()).unwrap();
        let expect = b.transpose().unwrap().matmul(&Tensor::new(vec![3, 1], d).unwrap()).unwrap();
        for (x, y) in got.iter().zip(expect.data()) {
            assert!((x - y).abs() <= 1e-9);
        }

        let no_mask = TapeQuadratic { a: spd(&mut rng, 4), b: Tensor::zeros(&[3, 4]) };
        let dv = vec![1.0; 4];
        let z = directional_second_derivative(&no_mask, &w, &m, Role::Mask, Role::Weight, &dv, &FdConfig::default()).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_direction() {
        let mut rng = SeededRng::new(1);
        let obj = TapeQuadratic { a: spd(&mut rng, 3), b: Tensor::zeros(&[2, 3]) };
        let w = vec![0.0; 3];
        let m = vec![1.0; 2];
        let fd = FdConfig::default();
        assert!(hessian_vector_product(&obj, &w, &m, &[1.0, 2.0], &fd).is_err());
        assert!(hessian_vector_product(&obj, &w, &m, &[1.0, f64::NAN, 0.0], &fd).is_err());
        let bad = FdConfig { eps_base: 0.0, ..fd };
        assert!(hessian_vector_product(&obj, &w, &m, &[1.0, 0.0, 0.0], &bad).is_err());
    }
}
