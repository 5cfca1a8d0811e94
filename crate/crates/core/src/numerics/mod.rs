//! Dense tensors, forward/backward kernels, deterministic RNG and the
//! finite-difference gradient oracle.

pub mod cmxt;
pub mod flops;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
mod param;
mod rng;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, CheckOptions, GradReport};
pub use kernels::{Pointwise, PoolKind};
pub use layers::{conv1x1, linear, Activation, Conv1x1, DwConv3x3, Linear};
pub use param::{join, Param, Parameterized};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Tensor, MAX_RANK};
