//! Kernel conjugate gradient regression with early stopping.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernel`]: kernels on `[0, 1]`, the normalized kernel matrix `K_n` and
//!   the `K_n`-weighted inner product.
//! - [`cg`]: the kernel CG recursion (residual minimised in the `K_n`
//!   seminorm, or in the Euclidean norm for the kernel PLS variant), a
//!   brute-force Krylov oracle, kernel ridge regression and prediction.
//! - [`stopping`]: discrepancy thresholds, stop-index selection and hold-out
//!   selection.
//! - [`synth`]: synthetic Mercer models with prescribed spectral decay and
//!   source regularity, and seeded samplers.
//! - [`eval`]: exact spectral error norms, a Monte-Carlo fallback and the
//!   effective dimension.
//! - [`harness`]: rate sweeps over a sample-size grid, log-log slope fitting
//!   and solver comparisons.

pub mod cg;
pub mod error;
pub mod eval;
pub mod harness;
pub mod kernel;
pub mod numeric;
pub mod stopping;
pub mod synth;

pub use error::{Error, Result};
