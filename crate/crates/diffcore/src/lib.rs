//! Dense float64 arrays with tape-based reverse-mode differentiation.
//!
//! Forward operations are methods on [`Tape`] and return [`Var`] handles;
//! [`Tape::backward`] produces [`Gradients`] for every leaf recorded with
//! gradient tracking. [`AdamState`] consumes those gradients and
//! [`grad_check`] verifies them against central differences.

mod adam;
mod array;
mod error;
mod gradcheck;
mod ops;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::DiffArray;
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, grad_check_at, relative_error, GradCheckReport};
pub use ops::conv::conv_output_len;
pub use ops::linalg::{matmul_nt_raw, matmul_raw};
pub use ops::norm::{BatchNormState, BatchStats, NormMode, BN_EPSILON, BN_MOMENTUM, L2_NORM_FLOOR};
pub use tape::{CustomOp, Gradients, Tape, Var};
