use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};

/// Floating-point element type accepted by [`Tensor`](super::Tensor) and the tape.
///
/// Implemented for every type meeting the bounds; in practice `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for literals inside generic code.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
}
