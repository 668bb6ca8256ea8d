//! Reverse-mode differentiable tensor core.
//!
//! A [`Tape`] records the forward pass of one computation; [`ParamStore`]
//! owns named weights, their gradient accumulators and Adam moments. The
//! [`nn`] module builds the few layers the forecasting model needs on top
//! of the tape ops.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod nn;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use params::{Adam, ParamId, ParamStore, StepLr};
pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
