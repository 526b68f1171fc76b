use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{self, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which half of the bi-level parameterisation a leaf belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Weight,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LeafId {
    pub id: usize,
    pub role: Role,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Square(Var),
    Softplus(Var),
    Sum(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    AvgPool(Var, usize),
    SoftmaxXent { logits: Var, probs: Tensor<T>, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Linear record of a computation, differentiated by a single reverse sweep.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction. ReLU uses subgradient 0 at the kink.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaves: Vec<(LeafId, Var)>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `var`; zeros if `var` does not influence the output.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>, role: Role) -> Var {
        let id = LeafId { id: self.leaves.len(), role, shape: value.shape().to_vec() };
        let var = self.push(value, Op::Leaf);
        self.leaves.push((id, var));
        var
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &(LeafId, Var)> {
        self.leaves.iter()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = ndtensor::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.push(v, Op::Conv2d { input, kernel, stride, pad }))
    }

    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let v = ndtensor::avg_pool2d(self.value(a), k)?;
        Ok(self.push(v, Op::AvgPool(a, k)))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, k) = ndtensor::as_matrix(x.shape())?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Shape(format!("label {label} out of range for {k} classes")));
            }
            let row = &x.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        let loss = loss / T::lit(n as f64);
        let probs = Tensor::new(vec![n, k], probs)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, probs, labels: labels.to_vec() }))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar output, got {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![T::one()])?);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |target: Var, contribution: Tensor<T>| -> Result<()> {
                match &mut grads[target.0] {
                    Some(acc) => *acc = acc.add(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    send(*a, g.reduce_to_shape(self.value(*a).shape())?)?;
                    send(*b, g.reduce_to_shape(self.value(*b).shape())?)?;
                }
                Op::Sub(a, b) => {
                    send(*a, g.reduce_to_shape(self.value(*a).shape())?)?;
                    send(*b, g.map(|x| -x).reduce_to_shape(self.value(*b).shape())?)?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, g.mul(vb)?.reduce_to_shape(va.shape())?)?;
                    send(*b, g.mul(va)?.reduce_to_shape(vb.shape())?)?;
                }
                Op::Scale(a, c) => send(*a, g.scale(*c))?,
                Op::Relu(a) => {
                    let mask = self.value(*a).map(|x| if x > T::zero() { T::one() } else { T::zero() });
                    send(*a, g.mul(&mask)?)?;
                }
                Op::Square(a) => send(*a, g.mul(&self.value(*a).scale(T::lit(2.0)))?)?,
                Op::Softplus(a) => send(*a, g.mul(&self.value(*a).map(sigmoid))?)?,
                Op::Sum(a) => {
                    let gv = g.item()?;
                    send(*a, Tensor::full(self.value(*a).shape(), gv))?;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, g.matmul(&vb.transpose()?)?)?;
                    send(*b, va.transpose()?.matmul(&g)?)?;
                }
                Op::Reshape(a) => send(*a, g.reshape(self.value(*a).shape())?)?,
                Op::Conv2d { input, kernel, stride, pad } => {
                    let (vi, vk) = (self.value(*input), self.value(*kernel));
                    send(*input, ndtensor::conv2d_grad_input(&g, vk, vi.shape(), *stride, *pad)?)?;
                    send(*kernel, ndtensor::conv2d_grad_kernel(vi, &g, vk.shape(), *stride, *pad)?)?;
                }
                Op::AvgPool(a, k) => send(*a, ndtensor::avg_pool2d_backward(&g, self.value(*a).shape(), *k)?)?,
                Op::SoftmaxXent { logits, probs, labels } => {
                    let n = labels.len();
                    let k = probs.shape()[1];
                    let scale = g.item()? / T::lit(n as f64);
                    let mut d = probs.data().to_vec();
                    for (r, &label) in labels.iter().enumerate() {
                        d[r * k + label] -= T::one();
                    }
                    for v in &mut d {
                        *v *= scale;
                    }
                    send(*logits, Tensor::new(vec![n, k], d)?)?;
                }
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradients of `output` for every registered leaf, in registration order.
    pub fn leaf_gradients(&self, output: Var) -> Result<Vec<(LeafId, Tensor<T>)>> {
        let grads = self.backward(output)?;
        Ok(self.leaves.iter().map(|(id, var)| (id.clone(), grads.wrt(*var))).collect())
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
