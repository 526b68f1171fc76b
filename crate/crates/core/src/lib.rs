//! Influence-function based second-order channel pruning.
//!
//! The crate is layered bottom-up:
//!
//! - [`ndtensor`]: dense tensors and seeded random streams,
//! - [`autograd`]: a reverse-mode tape plus finite-difference second derivatives,
//! - [`net`]: gated networks whose prunable channels carry continuous gates,
//! - [`costmodel`]: channel couplings and FLOPs / memory accounting,
//! - [`influence`]: retraining-free loss-change estimates and sensitivity scores,
//! - [`pruner`]: incremental, one-shot and hybrid pruning loops,
//! - [`oracle`]: retraining ground truth, brute-force matrices and closed-form testbeds.
//!
//! Tensor and tape code is generic over the scalar type; the model zoo and
//! everything above it runs in `f64`.

pub mod autograd;
pub mod costmodel;
pub mod error;
pub mod influence;
pub mod ndtensor;
pub mod net;
pub mod oracle;
pub mod pruner;

pub use error::{Error, Result};

/// Double-precision tensor, the working type of the model zoo.
pub type Tensor64 = ndtensor::Tensor<f64>;
pub type Tensor32 = ndtensor::Tensor<f32>;
pub type Tape64 = autograd::Tape<f64>;
pub type LossGrad64 = autograd::LossGrad<f64>;
