//! Monte-Carlo estimation of the mean-field cost functional.
//!
//! Two estimators: the direct one samples under the controlled measure
//! (supplied mean curve plugged into the intensities); the reweighted one
//! samples under the reference chain and weights with the Girsanov
//! density, with each expectation normalized by the sample mean weight so
//! that constants are reproduced exactly. Inner mean-field expectations
//! reuse the same sample, a nested-estimator bias of order `1/sqrt(N)`
//! that is far below the reported standard errors at the path counts
//! used here.

use crate::chain::{
    simulate_batch, ConstantControl, ControlSignal, GeneratorIntensity, GeneratorMatrix,
    InitialLaw, Intensity, JumpPath, PerturbedControl, Prefix, State,
};
use crate::error::{Error, Result};
use crate::girsanov::{density_on_grid, DensityInputs};
use crate::meanfield::MeanCurve;
use crate::numeric::{mean_se, pairwise_sum};
use rayon::prelude::*;
use serde::Serialize;

/// Running cost `f(t, x(t), m_f, u)`, terminal cost `h(x(T), m_h)` and
/// the mean functionals feeding their mean arguments.
pub struct CostSpec {
    pub running: Box<dyn Fn(f64, State, f64, f64) -> f64 + Sync + Send>,
    pub terminal: Box<dyn Fn(State, f64) -> f64 + Sync + Send>,
    pub kappa: Box<dyn Fn(State) -> f64 + Sync + Send>,
    pub kappa_f: Box<dyn Fn(State) -> f64 + Sync + Send>,
    pub kappa_h: Box<dyn Fn(State) -> f64 + Sync + Send>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Direct,
    Reweighted,
}

/// A cost value with its Monte-Carlo standard error.
#[derive(Debug, Clone, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    #[serde(rename = "se")]
    pub standard_error: f64,
    pub n_paths: usize,
    pub estimator: EstimatorKind,
}

impl CostEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serialization")
    }

    /// Whether two estimates agree within `k` combined standard errors.
    pub fn agrees_with(&self, other: &CostEstimate, k: f64) -> bool {
        let combined = (self.standard_error.powi(2) + other.standard_error.powi(2)).sqrt();
        (self.value - other.value).abs() <= k * combined
    }
}

/// Uniform node grid with `cells` cells on `[0, horizon]`.
pub fn uniform_grid(horizon: f64, cells: usize) -> Vec<f64> {
    (0..=cells)
        .map(|k| horizon * k as f64 / cells as f64)
        .collect()
}

/// Inner curves estimated on the sample: `m_f(t_k) = mean L(t_k) kappa_f`
/// and `m_h = mean L(T) kappa_h(x(T))`, both unnormalized per the recast
/// cost functional.
struct InnerCurves {
    m_f: Vec<f64>,
    m_h: f64,
    /// Sample mean weight at each node, the normalizer.
    b: Vec<f64>,
}

fn inner_curves(
    paths: &[JumpPath],
    inputs: &DensityInputs,
    grid: &[f64],
    spec: &CostSpec,
) -> InnerCurves {
    let n = paths.len();
    let dim = grid.len();
    let chunk = 1024;
    let partials: Vec<(Vec<f64>, Vec<f64>, f64)> = paths
        .par_chunks(chunk)
        .map(|block| {
            let mut b = vec![0.0; dim];
            let mut af = vec![0.0; dim];
            let mut mh = 0.0;
            for path in block {
                let traj = density_on_grid(path, inputs, grid).expect("density evaluation");
                for (k, &t) in grid.iter().enumerate() {
                    let l = traj.value_at(t);
                    b[k] += l;
                    af[k] += l * (spec.kappa_f)(path.state_at(t));
                }
                mh += traj.terminal() * (spec.kappa_h)(path.terminal_state());
            }
            (b, af, mh)
        })
        .collect();

    let mut b = vec![0.0; dim];
    let mut m_f = vec![0.0; dim];
    for k in 0..dim {
        let bs: Vec<f64> = partials.iter().map(|(p, _, _)| p[k]).collect();
        let afs: Vec<f64> = partials.iter().map(|(_, p, _)| p[k]).collect();
        b[k] = pairwise_sum(&bs) / n as f64;
        m_f[k] = pairwise_sum(&afs) / n as f64;
    }
    let mhs: Vec<f64> = partials.iter().map(|&(_, _, m)| m).collect();
    let m_h = pairwise_sum(&mhs) / n as f64;
    InnerCurves { m_f, m_h, b }
}

/// Cell index of the grid containing `[t0, t1]` (left-node convention).
fn cell_of(grid: &[f64], t0: f64) -> usize {
    let k = grid.partition_point(|&g| g <= t0);
    k.saturating_sub(1).min(grid.len() - 2)
}

/// Per-path normalized contributions of the reweighted estimator; their
/// mean is the estimate and their spread its standard error.
fn reweighted_contributions(
    paths: &[JumpPath],
    inputs: &DensityInputs,
    grid: &[f64],
    spec: &CostSpec,
) -> Vec<f64> {
    let curves = inner_curves(paths, inputs, grid, spec);
    let b_t = *curves.b.last().unwrap();
    paths
        .par_iter()
        .map(|path| {
            let traj = density_on_grid(path, inputs, grid).expect("density evaluation");
            let prefix = Prefix::of(path);
            let mut running = 0.0;
            for (k, seg) in traj.segments.iter().enumerate() {
                let cell = cell_of(grid, seg.t0);
                let b_cell = curves.b[cell];
                if b_cell <= 0.0 {
                    continue;
                }
                let l0 = traj.value_at_node(k);
                let l1 = traj.value_before_node(k + 1);
                let lm = (l0 * l1).sqrt();
                let mid = 0.5 * (seg.t0 + seg.t1);
                let state = inputs.gen.states()[seg.state_index];
                let mf = curves.m_f[cell];
                let u = inputs.control.value(mid, &prefix);
                let f0 = (spec.running)(seg.t0, state, mf, u);
                let fm = (spec.running)(mid, state, mf, u);
                let f1 = (spec.running)(seg.t1, state, mf, u);
                let integral = (seg.t1 - seg.t0) / 6.0 * (l0 * f0 + 4.0 * lm * fm + l1 * f1);
                running += integral / b_cell;
            }
            let terminal = if b_t > 0.0 {
                traj.terminal() * (spec.terminal)(path.terminal_state(), curves.m_h) / b_t
            } else {
                0.0
            };
            running + terminal
        })
        .collect()
}

/// Reweighted estimator: simulate under the reference chain, weight by
/// the density with the supplied mean curve plugged into the intensities,
/// and normalize each expectation by the sample mean weight.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cost_reweighted(
    spec: &CostSpec,
    intensity: &dyn Intensity,
    gen: &GeneratorMatrix,
    control: &dyn ControlSignal,
    mean: Option<&MeanCurve>,
    initial: &InitialLaw,
    horizon: f64,
    n_paths: usize,
    grid_cells: usize,
    seed: u64,
) -> Result<CostEstimate> {
    if n_paths < 2 {
        return Err(Error::InsufficientPaths(n_paths));
    }
    let ref_intensity = GeneratorIntensity::new(gen);
    let paths = simulate_batch(
        &ref_intensity,
        None,
        &ConstantControl(0.0),
        initial,
        horizon,
        n_paths,
        seed,
    )?;
    let inputs = DensityInputs {
        intensity,
        gen,
        mean,
        control,
    };
    let grid = uniform_grid(horizon, grid_cells);
    let contributions = reweighted_contributions(&paths, &inputs, &grid, spec);
    let (value, se) = mean_se(&contributions);
    Ok(CostEstimate {
        value,
        standard_error: se,
        n_paths,
        estimator: EstimatorKind::Reweighted,
    })
}

/// Path segments refined by the node grid, for exact piecewise running
/// cost integration under the controlled measure.
fn refined_segments(path: &JumpPath, grid: &[f64]) -> Vec<(f64, f64, State)> {
    let horizon = path.horizon();
    let mut nodes: Vec<f64> = Vec::with_capacity(grid.len() + path.events().len());
    nodes.push(0.0);
    nodes.extend(grid.iter().copied().filter(|&t| t > 0.0 && t < horizon));
    nodes.extend(
        path.events()
            .iter()
            .map(|&(t, _)| t)
            .filter(|&t| t < horizon),
    );
    nodes.push(horizon);
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup();
    nodes
        .windows(2)
        .map(|w| (w[0], w[1], path.state_at(w[0])))
        .collect()
}

/// Direct estimator: simulate under the controlled measure with the
/// supplied mean curve and average the cost pathwise. Mean arguments of
/// `f` and `h` are read from the same curve, not re-estimated.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cost_direct(
    spec: &CostSpec,
    intensity: &dyn Intensity,
    control: &dyn ControlSignal,
    mean: Option<&MeanCurve>,
    initial: &InitialLaw,
    horizon: f64,
    n_paths: usize,
    grid_cells: usize,
    seed: u64,
) -> Result<CostEstimate> {
    if n_paths < 2 {
        return Err(Error::InsufficientPaths(n_paths));
    }
    let paths = simulate_batch(intensity, mean, control, initial, horizon, n_paths, seed)?;
    let grid = uniform_grid(horizon, grid_cells);
    let m_h = mean.map_or(0.0, |c| c.terminal());
    let values: Vec<f64> = paths
        .par_iter()
        .map(|path| {
            let prefix = Prefix::of(path);
            let mut total = 0.0;
            for (t0, t1, state) in refined_segments(path, &grid) {
                let mid = 0.5 * (t0 + t1);
                let mf = mean.map_or(0.0, |c| c.value_before(mid));
                let u = control.value(mid, &prefix);
                let f0 = (spec.running)(t0, state, mf, u);
                let fm = (spec.running)(mid, state, mf, u);
                let f1 = (spec.running)(t1, state, mf, u);
                total += (t1 - t0) / 6.0 * (f0 + 4.0 * fm + f1);
            }
            total + (spec.terminal)(path.terminal_state(), m_h)
        })
        .collect();
    let (value, se) = mean_se(&values);
    Ok(CostEstimate {
        value,
        standard_error: se,
        n_paths,
        estimator: EstimatorKind::Direct,
    })
}

/// A named control perturbation direction.
pub struct Direction<'a> {
    pub name: String,
    pub signal: &'a dyn ControlSignal,
}

/// Probe result for one direction.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionResult {
    pub name: String,
    /// Common-random-numbers estimate of `J(u + eps d) - J(u)`.
    pub delta: f64,
    pub se: f64,
    /// True when the difference is not significantly negative.
    pub non_improving: bool,
}

/// Local-optimality evidence around a base control.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub directions: Vec<DirectionResult>,
    /// Fraction of directions with `delta >= -3 se`.
    pub fraction_non_improving: f64,
    pub n_paths: usize,
}

impl PerturbationReport {
    pub fn all_non_improving(&self) -> bool {
        self.directions.iter().all(|d| d.non_improving)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Common-random-numbers probe of `J(u + eps d) - J(u)` over a battery
/// of directions, using the reweighted estimator on one shared sample.
///
/// Perturbed control values are checked against the admissible interval
/// at every path segment; a violation aborts with
/// [`Error::InadmissiblePerturbation`].
#[allow(clippy::too_many_arguments)]
pub fn perturbation_probe(
    spec: &CostSpec,
    intensity: &dyn Intensity,
    gen: &GeneratorMatrix,
    base: &dyn ControlSignal,
    directions: &[Direction],
    eps: f64,
    mean: Option<&MeanCurve>,
    initial: &InitialLaw,
    horizon: f64,
    n_paths: usize,
    grid_cells: usize,
    seed: u64,
    control_set: (f64, f64),
) -> Result<PerturbationReport> {
    if n_paths < 2 {
        return Err(Error::InsufficientPaths(n_paths));
    }
    let (lo, hi) = control_set;
    if lo > hi {
        return Err(Error::EmptyControlSet { lo, hi });
    }
    let ref_intensity = GeneratorIntensity::new(gen);
    let paths = simulate_batch(
        &ref_intensity,
        None,
        &ConstantControl(0.0),
        initial,
        horizon,
        n_paths,
        seed,
    )?;
    let grid = uniform_grid(horizon, grid_cells);

    let base_inputs = DensityInputs {
        intensity,
        gen,
        mean,
        control: base,
    };
    let base_contributions = reweighted_contributions(&paths, &base_inputs, &grid, spec);

    let mut results = Vec::with_capacity(directions.len());
    for dir in directions {
        let perturbed = PerturbedControl {
            base,
            direction: dir.signal,
            eps,
        };
        // Admissibility scan at segment midpoints and jump times.
        for path in &paths {
            let prefix = Prefix::of(path);
            for (t0, t1, _) in refined_segments(path, &grid) {
                let mid = 0.5 * (t0 + t1);
                for t in [mid, t1] {
                    let v = perturbed.value(t, &prefix);
                    if v < lo || v > hi {
                        return Err(Error::InadmissiblePerturbation {
                            t,
                            value: v,
                            lo,
                            hi,
                        });
                    }
                }
            }
        }
        let inputs = DensityInputs {
            intensity,
            gen,
            mean,
            control: &perturbed,
        };
        let contributions = reweighted_contributions(&paths, &inputs, &grid, spec);
        let diffs: Vec<f64> = contributions
            .iter()
            .zip(&base_contributions)
            .map(|(a, b)| a - b)
            .collect();
        let (delta, se) = mean_se(&diffs);
        results.push(DirectionResult {
            name: dir.name.clone(),
            delta,
            se,
            non_improving: delta >= -3.0 * se,
        });
    }
    let frac =
        results.iter().filter(|r| r.non_improving).count() as f64 / results.len().max(1) as f64;
    Ok(PerturbationReport {
        directions: results,
        fraction_non_improving: frac,
        n_paths,
    })
}
