//! Cross-modal feature rectification and fusion for RGB-X segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, kernels with hand-written backward passes, RNG,
//!   gradient checking and the `CMXT` tensor file format.
//! * [`rectify`]: channel- and spatial-wise cross-modal feature rectification.
//! * [`fusion`]: two-stage feature fusion with linear-cost cross-attention.
//! * [`encoders`]: polarization, event, thermal and depth input encoders.
//! * [`network`]: a toy two-stream encoder/decoder with ablation switches.
//! * [`harness`]: synthetic data, gradient suite, trainer and ablation runner.

pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod network;
pub mod numerics;
pub mod rectify;

pub use error::{Error, Result};
pub use numerics::{Param, Parameterized, Rng, Scalar, Tensor};
