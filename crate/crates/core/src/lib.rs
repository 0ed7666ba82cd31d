//! Numerical laboratory for Lavrentiev regularization `(A + γI)u = f^δ` of
//! linear equations with nonnegative and accretive operators.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod format;
pub mod fractional;
pub mod lavrentiev;
pub mod linalg;
pub mod operator;
pub mod rate_lab;
pub mod rules;

pub use error::{LavregError, Result};
