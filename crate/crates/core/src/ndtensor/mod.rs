//! Dense row-major tensors and deterministic random streams.
//!
//! Everything above this module (autograd, networks, influence scores) is
//! built on [`Tensor`]. Layouts follow the usual deep-learning conventions:
//! activations are `NCHW`, convolution kernels are `OIHW`, and [`conv2d`]
//! is a cross-correlation (the kernel is not flipped).
//!
//! Elementwise binary operations broadcast like NumPy: shapes are aligned at
//! their trailing axes and every pair of extents must either match or contain
//! a `1`. A missing leading axis behaves like an extent of `1`.

mod conv;
mod rng;
mod scalar;

pub use conv::{avg_pool2d, avg_pool2d_backward, conv2d, conv2d_grad_input, conv2d_grad_kernel, conv_output_extent};
pub use rng::SeededRng;
pub use scalar::Scalar;

use crate::error::{Error, Result};

/// Initial contents for [`Tensor::create`].
#[derive(Debug, Clone, PartialEq)]
pub enum Init<T> {
    Zeros,
    Ones,
    Constant(T),
    FromValues(Vec<T>),
}

/// Dense n-dimensional array of scalars in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_extents(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "length mismatch: shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn create(shape: &[usize], init: Init<T>) -> Result<Self> {
        check_extents(shape)?;
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Constant(c) => vec![c; n],
            Init::FromValues(v) => v,
        };
        Self::new(shape.to_vec(), data)
    }

    /// Zero tensor. Panics on a zero extent; use [`Tensor::create`] for checked construction.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::create(shape, Init::Zeros).expect("valid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::create(shape, Init::Ones).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::create(shape, Init::Constant(value)).expect("valid shape")
    }

    /// Rank-1 tensor holding `values`.
    pub fn from_vec(values: Vec<T>) -> Self {
        let n = values.len().max(1);
        let values = if values.is_empty() { vec![T::zero()] } else { values };
        Self { shape: vec![n], data: values }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_extents(shape)?;
        if numel(shape) != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.data.len() != other.data.len() {
            return Err(Error::Shape(format!("dot of {:?} and {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_inf(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, |a, b| a / b)
    }

    /// Elementwise combination with NumPy-style broadcasting.
    pub fn zip_broadcast(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self { shape: self.shape.clone(), data });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let n = numel(&out_shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            data.push(f(self.data[ia], other.data[ib]));
            increment(&mut idx, &out_shape);
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of broadcasting).
    pub fn reduce_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let target = broadcast_shape(shape, &self.shape)?;
        if target != self.shape {
            return Err(Error::Shape(format!("cannot reduce {:?} to {shape:?}", self.shape)));
        }
        let strides = broadcast_strides(shape, &self.shape);
        let mut out = vec![T::zero(); numel(shape)];
        let mut idx = vec![0usize; self.shape.len()];
        for &v in &self.data {
            let o: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out[o] = out[o] + v;
            increment(&mut idx, &self.shape);
        }
        Ok(Self { shape: shape.to_vec(), data: out })
    }

    /// Standard product of `[m, k]` and `[k, n]` matrices.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = as_matrix(&self.shape)?;
        let (k2, n) = as_matrix(&other.shape)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = as_matrix(&self.shape)?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }
}

/// Operation selector for [`map_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapReduceOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Neg,
    Sum,
    Max,
}

/// Uniform entry point over the elementwise and reduction kernels.
///
/// Binary ops take two operands and broadcast; unary and reduction ops take
/// one. Reductions return a one-element tensor.
pub fn map_reduce<T: Scalar>(op: MapReduceOp, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    use MapReduceOp::*;
    let arity = match op {
        Add | Sub | Mul | Div => 2,
        Relu | Neg | Sum | Max => 1,
    };
    if operands.len() != arity {
        return Err(Error::Shape(format!("{op:?} takes {arity} operand(s), got {}", operands.len())));
    }
    let a = operands[0];
    Ok(match op {
        Add => a.add(operands[1])?,
        Sub => a.sub(operands[1])?,
        Mul => a.mul(operands[1])?,
        Div => a.div(operands[1])?,
        Relu => a.relu(),
        Neg => a.map(|x| -x),
        Sum => Tensor::scalar(a.sum()),
        Max => Tensor::scalar(a.max()),
    })
}

pub(crate) fn as_matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::Shape(format!("expected a matrix, got shape {shape:?}"))),
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Shape(format!("shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn create_fills() {
        let x = Tensor::<f64>::create(&[2, 2], Init::Ones).unwrap();
        assert_eq!(x.data(), &[1.0; 4]);
        let y = Tensor::create(&[3], Init::FromValues(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
        assert!(Tensor::create(&[2], Init::FromValues(vec![1.0, 2.0, 3.0])).is_err());
        assert!(Tensor::<f64>::create(&[0, 2], Init::Zeros).is_err());
    }

    #[test]
    fn matmul_hand_cases() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        assert!(a.matmul(&b.transpose().unwrap()).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(3);
        for trial in 0..100 {
            let (m, k, n) = (1 + trial % 7, 1 + trial % 5, 1 + trial % 4);
            let a = rng.normal(&[m, k], 0.0, 1.0);
            let b = rng.normal(&[k, n], 0.0, 1.0);
            let fast = a.matmul(&b).unwrap();
            for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(map_reduce(MapReduceOp::Relu, &[&x]).unwrap().data(), &[0.0, 0.0, 2.0]);
        let ones = Tensor::<f64>::ones(&[4]);
        assert_eq!(map_reduce(MapReduceOp::Sum, &[&ones]).unwrap().item().unwrap(), 4.0);
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[1], &[3.0]);
        assert_eq!(map_reduce(MapReduceOp::Add, &[&a, &b]).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(map_reduce(MapReduceOp::Max, &[&x]).unwrap().item().unwrap(), 2.0);
        assert!(map_reduce(MapReduceOp::Add, &[&a, &t(&[3], &[1.0, 2.0, 3.0])]).is_err());
        assert!(map_reduce(MapReduceOp::Add, &[&a]).is_err());
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let col = t(&[2, 1], &[1.0, -1.0]);
        assert_eq!(a.mul(&col).unwrap().data(), &[1.0, 2.0, 3.0, -4.0, -5.0, -6.0]);
        assert_eq!(a.reduce_to_shape(&[3]).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(a.reduce_to_shape(&[2, 1]).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(a.reduce_to_shape(&[1]).unwrap().data(), &[21.0]);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = t(&[2, 2], &[1.0, -2.0, 3.0, -4.0]);
        let before = a.clone();
        let _ = a.relu();
        let _ = a.matmul(&a).unwrap();
        let _ = a.add(&a).unwrap();
        assert_eq!(a, before);
    }

    #[test]
    fn works_in_single_precision() {
        let a = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::ones(&[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0f32, 7.0]);
    }
}
