//! McKean-Vlasov consistency: the curve `mu(t) = E^u[kappa(x(t))]` that
//! the controlled intensities depend on, and a damped Picard iteration
//! that makes it consistent with itself.

use crate::chain::{
    simulate_batch, ControlSignal, GeneratorMatrix, InitialLaw, Intensity, JumpPath, State,
};
use crate::error::{Error, Result};
use crate::girsanov::{density_on_grid, DensityInputs};
use crate::numeric::{fmt_f64, pairwise_sum};
use rayon::prelude::*;
use std::io::Write;

/// A mean functional curve on a uniform time grid.
///
/// Intensities and controls read it with the left-limit convention:
/// the value on `(t_k, t_{k+1}]` is `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCurve {
    grid: Vec<f64>,
    values: Vec<f64>,
    kappa_tag: String,
}

impl MeanCurve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>, kappa_tag: impl Into<String>) -> Result<Self> {
        if grid.len() != values.len() || grid.len() < 2 {
            return Err(Error::InvalidInput(
                "mean curve needs matching grid and values".into(),
            ));
        }
        let h = grid[1] - grid[0];
        if !(h > 0.0) {
            return Err(Error::InvalidInput("mean grid must be increasing".into()));
        }
        for k in 1..grid.len() {
            if ((grid[k] - grid[k - 1]) - h).abs() > 1e-9 * h.max(1.0) {
                return Err(Error::InvalidInput("mean grid must be uniform".into()));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite mean value".into()));
        }
        Ok(MeanCurve {
            grid,
            values,
            kappa_tag: kappa_tag.into(),
        })
    }

    /// Uniform grid on `[0, horizon]` with `values.len() - 1` cells.
    pub fn uniform(horizon: f64, values: Vec<f64>, kappa_tag: impl Into<String>) -> Result<Self> {
        let k = values.len();
        if k < 2 {
            return Err(Error::InvalidInput(
                "mean curve needs at least 2 points".into(),
            ));
        }
        let grid = (0..k)
            .map(|i| horizon * i as f64 / (k - 1) as f64)
            .collect();
        MeanCurve::new(grid, values, kappa_tag)
    }

    /// Constant curve.
    pub fn constant(horizon: f64, points: usize, value: f64, kappa_tag: impl Into<String>) -> Self {
        MeanCurve::uniform(horizon, vec![value; points.max(2)], kappa_tag)
            .expect("constant curve construction")
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kappa_tag(&self) -> &str {
        &self.kappa_tag
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Left-limit lookup `mu(t-)`: piecewise constant, the value on
    /// `(t_k, t_{k+1}]` is `values[k]`.
    pub fn value_before(&self, t: f64) -> f64 {
        let k = self.grid.partition_point(|&g| g < t);
        self.values[k.saturating_sub(1).min(self.values.len() - 1)]
    }

    /// Linear interpolation, for smooth consumers (backward sweeps).
    pub fn interpolate(&self, t: f64) -> f64 {
        let n = self.grid.len();
        if t <= self.grid[0] {
            return self.values[0];
        }
        if t >= self.grid[n - 1] {
            return self.values[n - 1];
        }
        let k = self.grid.partition_point(|&g| g <= t) - 1;
        let w = (t - self.grid[k]) / (self.grid[k + 1] - self.grid[k]);
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Sup-norm distance on a shared grid.
    pub fn sup_distance(&self, other: &MeanCurve) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// CSV serialization: header `t,mu`, one row per grid point.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t,mu")?;
        for (t, v) in self.grid.iter().zip(&self.values) {
            writeln!(w, "{},{}", fmt_f64(*t), fmt_f64(*v))?;
        }
        Ok(())
    }
}

/// A mean-curve estimate with pointwise standard errors.
#[derive(Debug, Clone)]
pub struct MeanEstimate {
    pub curve: MeanCurve,
    pub pointwise_se: Vec<f64>,
}

impl MeanEstimate {
    pub fn max_se(&self) -> f64 {
        self.pointwise_se.iter().fold(0.0f64, |a, &b| a.max(b))
    }
}

/// Configuration of the damped Picard iteration.
#[derive(Debug, Clone)]
pub struct FixedPointConfig {
    pub max_iters: usize,
    /// Damping `theta` in `(0, 1]`.
    pub damping: f64,
    /// Sup-norm tolerance on the iterate change.
    pub tol: f64,
    /// Monte-Carlo paths per iteration.
    pub n_paths: usize,
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "damping {} outside (0, 1]",
                self.damping
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be positive".into()));
        }
        Ok(())
    }
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            max_iters: 30,
            damping: 0.5,
            tol: 0.02,
            n_paths: 100_000,
        }
    }
}

/// One reweighting pass over a fresh reference-measure sample:
/// `output(t_k) = mean_p L_p(t_k) kappa(x_p(t_k))` with the input curve
/// plugged into the intensities.
#[allow(clippy::too_many_arguments)]
pub fn estimate_mean_curve<K: Fn(State) -> f64 + Sync>(
    intensity: &dyn Intensity,
    gen: &GeneratorMatrix,
    control: &dyn ControlSignal,
    input: &MeanCurve,
    kappa: &K,
    initial: &InitialLaw,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MeanEstimate> {
    if n_paths < 2 {
        return Err(Error::InsufficientPaths(n_paths));
    }
    let ref_intensity = crate::chain::GeneratorIntensity::new(gen);
    let paths = simulate_batch(
        &ref_intensity,
        None,
        &crate::chain::ConstantControl(0.0),
        initial,
        horizon,
        n_paths,
        seed,
    )?;
    mean_curve_from_paths(
        &paths,
        &DensityInputs {
            intensity,
            gen,
            mean: Some(input),
            control,
        },
        input.grid(),
        kappa,
        input.kappa_tag(),
    )
}

/// Reweighting pass over an existing reference sample.
pub(crate) fn mean_curve_from_paths<K: Fn(State) -> f64 + Sync>(
    paths: &[JumpPath],
    inputs: &DensityInputs,
    grid: &[f64],
    kappa: &K,
    kappa_tag: &str,
) -> Result<MeanEstimate> {
    let n = paths.len();
    let dim = grid.len();
    // Per-path weighted kappa at each grid node, accumulated in fixed
    // chunks so the reduction is independent of thread scheduling.
    let chunk = 1024;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = paths
        .par_chunks(chunk)
        .map(|block| {
            let mut sum = vec![0.0; dim];
            let mut sum_sq = vec![0.0; dim];
            for path in block {
                let traj = density_on_grid(path, inputs, grid).expect("density evaluation");
                for (k, &t) in grid.iter().enumerate() {
                    let w = traj.value_at(t) * kappa(path.state_at(t));
                    sum[k] += w;
                    sum_sq[k] += w * w;
                }
            }
            (sum, sum_sq)
        })
        .collect();

    let mut values = vec![0.0; dim];
    let mut ses = vec![0.0; dim];
    for k in 0..dim {
        let sums: Vec<f64> = partials.iter().map(|(s, _)| s[k]).collect();
        let sqs: Vec<f64> = partials.iter().map(|(_, q)| q[k]).collect();
        let total = pairwise_sum(&sums);
        let total_sq = pairwise_sum(&sqs);
        let mean = total / n as f64;
        let var = (total_sq / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0);
        values[k] = mean;
        ses[k] = (var / n as f64).sqrt();
    }
    Ok(MeanEstimate {
        curve: MeanCurve::new(grid.to_vec(), values, kappa_tag)?,
        pointwise_se: ses,
    })
}

/// Outcome of the fixed-point iteration.
#[derive(Debug, Clone)]
pub struct FixedPointSolution {
    pub curve: MeanCurve,
    pub iterations: usize,
    /// Sup-norm change of the last accepted update.
    pub residual: f64,
    /// Max pointwise standard error of the final reweighting pass.
    pub max_se: f64,
}

/// Damped Picard iteration `mu <- (1 - theta) mu + theta Phi(mu)` where
/// `Phi` is one reweighting pass. The reference sample is held fixed
/// across iterations (common random numbers), so the iteration is a
/// deterministic map for a given seed; stopping couples the tolerance to
/// the Monte-Carlo noise level. Iterates are projected onto the
/// reachable range of `kappa` over the truncated state space, which the
/// raw weighted estimate can leave by sampling noise.
#[allow(clippy::too_many_arguments)]
pub fn solve_mean_fixed_point<K: Fn(State) -> f64 + Sync>(
    intensity: &dyn Intensity,
    gen: &GeneratorMatrix,
    control: &dyn ControlSignal,
    kappa: &K,
    kappa_tag: &str,
    initial: &InitialLaw,
    horizon: f64,
    grid_cells: usize,
    cfg: &FixedPointConfig,
    seed: u64,
) -> Result<FixedPointSolution> {
    cfg.validate()?;
    if cfg.n_paths < 2 {
        return Err(Error::InsufficientPaths(cfg.n_paths));
    }
    let ref_intensity = crate::chain::GeneratorIntensity::new(gen);
    let paths = simulate_batch(
        &ref_intensity,
        None,
        &crate::chain::ConstantControl(0.0),
        initial,
        horizon,
        cfg.n_paths,
        seed,
    )?;

    // Initial guess: the kappa-mean of the initial law, held constant.
    let kappa0 = match initial {
        InitialLaw::Point(s) => kappa(*s),
        InitialLaw::Categorical(pairs) => pairs.iter().map(|&(s, p)| p * kappa(s)).sum(),
    };
    let mut mu = MeanCurve::constant(horizon, grid_cells + 1, kappa0, kappa_tag);

    let kappa_lo = gen
        .states()
        .iter()
        .map(|&s| kappa(s))
        .fold(f64::INFINITY, f64::min);
    let kappa_hi = gen
        .states()
        .iter()
        .map(|&s| kappa(s))
        .fold(f64::NEG_INFINITY, f64::max);

    let mut residual = f64::INFINITY;
    for iter in 1..=cfg.max_iters {
        let est = mean_curve_from_paths(
            &paths,
            &DensityInputs {
                intensity,
                gen,
                mean: Some(&mu),
                control,
            },
            mu.grid(),
            kappa,
            kappa_tag,
        )?;
        let max_se = est.max_se();
        let next_values: Vec<f64> = mu
            .values()
            .iter()
            .zip(est.curve.values())
            .map(|(old, new)| {
                ((1.0 - cfg.damping) * old + cfg.damping * new).clamp(kappa_lo, kappa_hi)
            })
            .collect();
        let next = MeanCurve::new(mu.grid().to_vec(), next_values, kappa_tag)?;
        residual = mu.sup_distance(&next);
        mu = next;
        if residual <= cfg.tol + 3.0 * max_se {
            return Ok(FixedPointSolution {
                curve: mu,
                iterations: iter,
                residual,
                max_se,
            });
        }
    }
    Err(Error::NoConvergence {
        best: Box::new(mu),
        residual,
        iterations: cfg.max_iters,
    })
}
