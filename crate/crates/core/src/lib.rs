//! Federated training, differential privacy, gradient inversion and the
//! metrics used to measure leakage, built on `fedleak-tensor`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod data;
pub mod dp;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fed;
pub mod models;

pub use error::{CoreError, Result};
pub use fedleak_tensor as tensor;
