//! Numerical core of the ser-forge speech emotion recognition engine.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! only needs `alloc`: dense tensors with hand-written backward passes, the
//! log-mel filterbank front end, the toy trainable upstream encoder, the
//! mean-pooling and ECAPA-TDNN aggregators, checkpoint selection and
//! averaging, leave-one-session-out fold planning and WACC/UACC metrics.
//! File IO, the CLI and config parsing live in the `ser-forge` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod downstream;
pub mod error;
pub mod evaluator;
pub mod fbank;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod upstream;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
