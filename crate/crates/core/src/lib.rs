//! Image-based conditional average treatment effect estimation.
//!
//! Bayesian CNN cluster models fitted by variational inference, a TARNet
//! post-hoc clustering baseline, salience maps, out-of-sample scoring and a
//! synthetic-imagery simulation benchmark.

pub mod autodiff;
pub mod benchmark;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimands;
pub mod inference;
pub mod io;
pub mod models;
pub mod rng;
pub mod salience;
pub mod sim;
pub mod stats;
pub mod tensor;
pub mod variational;

pub use error::{Error, Result};
pub use tensor::Tensor;
