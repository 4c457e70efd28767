//! Optimal control of mean-field Markov chains.
//!
//! The controlled object is a pure-jump process on a finite truncation of
//! the nonnegative integers whose intensities may depend on time, the
//! path, a scalar mean functional of its own law, and a control signal.
//! Costs are estimated under the controlled measure either directly or by
//! reweighting reference-measure samples with the Girsanov density; the
//! costate field solves a backward ODE system on the state space, and the
//! control is recovered by pointwise Hamiltonian maximization.
//!
//! Modules:
//! - [`chain`]: generator validation, exact path simulation, path statistics
//! - [`girsanov`]: likelihood ratios, density processes, martingale checks
//! - [`cost`]: direct and reweighted cost estimation, perturbation probes
//! - [`meanfield`]: mean curves and the consistency fixed point
//! - [`adjoint`]: backward costate sweeps, Hamiltonians, stationarity checks
//! - [`examples`]: closed-form machinery for the shipped model problems

// Guards of the form `!(x > 0.0)` intentionally reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod chain;
pub mod cost;
pub mod error;
pub mod examples;
pub mod girsanov;
pub mod meanfield;
pub mod numeric;

pub use error::{Error, Result};
