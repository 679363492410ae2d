//! Numerical laboratory for low-rank adapter scaling.
//!
//! The crate implements low-rank adapters over frozen linear layers with
//! pluggable scaling rules (`alpha/r`, `alpha/sqrt(r)`, fixed), analytic
//! gradients with a finite-difference oracle, Monte Carlo estimation of the
//! two-step increment statistics, and desk-scale fine-tuning experiments
//! (rank sweeps, loss curves, magnitude-pruned recovery).

pub mod adapters;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod train;
pub mod variance;

pub use error::{CoreError, Result};
