//! Error type shared by all modules.

use crate::meanfield::MeanCurve;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// An off-diagonal generator entry is negative.
    #[error("negative rate g[{from},{to}] = {value}")]
    NegativeRate { from: usize, to: usize, value: f64 },

    /// A generator row does not sum to zero within tolerance.
    #[error("row {row} of generator sums to {sum}, expected 0")]
    RowSumViolation { row: usize, sum: f64 },

    /// A realized total exit rate exceeded the declared majorant.
    #[error("total rate {total} at t={t} exceeds majorant {bound}")]
    MajorantViolation { t: f64, total: f64, bound: f64 },

    /// A controlled rate is positive on a transition the reference
    /// generator forbids, so the measure change does not exist.
    #[error("lambda[{from},{to}] > 0 where g[{from},{to}] = 0")]
    UnsupportedTransition { from: usize, to: usize },

    /// A realized jump has zero controlled rate; the density vanishes.
    #[error("zero controlled rate on realized jump {from}->{to} at t={t}")]
    ZeroRateAtJump { t: f64, from: usize, to: usize },

    /// Monte-Carlo estimators need at least two paths.
    #[error("need at least 2 paths, got {0}")]
    InsufficientPaths(usize),

    /// A perturbed control left the admissible set.
    #[error("perturbed control {value} at t={t} outside [{lo}, {hi}]")]
    InadmissiblePerturbation {
        t: f64,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// Fixed-point iteration stopped at max_iters above tolerance.
    /// Carries the best iterate so callers can still inspect it.
    #[error("fixed point not converged after {iterations} iterations, residual {residual}")]
    NoConvergence {
        best: Box<MeanCurve>,
        residual: f64,
        iterations: usize,
    },

    /// The backward sweep produced a non-finite value.
    #[error("adjoint field non-finite at t={t}")]
    NonFiniteField { t: f64 },

    /// The mean ODE blew up before any constraint crossing.
    #[error("mean ODE state non-finite after t={last_valid_t}")]
    NonFiniteState { last_valid_t: f64 },

    /// The closed-form exit-time formula needs a genuine quadratic.
    #[error("quadratic coefficient A = 0; exit time formula needs A != 0")]
    ZeroQuadraticCoefficient,

    /// Control set is empty (lower bound above upper bound).
    #[error("empty control set [{lo}, {hi}]")]
    EmptyControlSet { lo: f64, hi: f64 },

    /// A jump path violates its structural invariants.
    #[error("invalid jump path: {0}")]
    InvalidPath(String),

    /// Generic invalid argument.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
