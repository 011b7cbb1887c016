//! Test-time adaptation by activation matching.
//!
//! A trained network records per-location means and variances of its
//! post-normalization activations on clean data. At test time each incoming batch
//! is pushed toward those statistics with one gradient step on an L1 alignment
//! loss, updating every parameter of the network.

pub mod adapt;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{sgd_step, NormMode, ParamKind, Parameter, Pooling, Tape, Tensor, Var};
