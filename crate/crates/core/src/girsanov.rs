//! Change of measure for controlled intensities.
//!
//! The density process `L^u` of the controlled measure with respect to
//! the reference chain is evaluated pathwise in log space, exactly at
//! grid nodes and jump times. Everything downstream treats `L^u` as an
//! importance weight over reference-measure samples; nothing is sampled
//! under the controlled measure except as a cross-check.

use crate::chain::{
    path_statistics, simulate_batch, ConstantControl, ControlSignal, GeneratorIntensity,
    GeneratorMatrix, InitialLaw, Intensity, JumpPath, Prefix, State,
};
use crate::error::{Error, Result};
use crate::meanfield::MeanCurve;
use crate::numeric::{adaptive_simpson, mean_se};
use rayon::prelude::*;
use serde::Serialize;

/// Per-segment integration tolerance for the Simpson fallback when the
/// rates are not piecewise constant in time.
const SEGMENT_TOL: f64 = 1e-10;

/// The likelihood-ratio field `ell_ij = lambda_ij / g_ij - 1` off the
/// diagonal, zero on it.
pub struct LikelihoodRatioField<'a> {
    intensity: &'a dyn Intensity,
    gen: &'a GeneratorMatrix,
}

/// Build the ratio field, which requires `g_ij > 0` wherever the
/// controlled rate can be positive.
pub fn likelihood_ratio_field<'a>(
    intensity: &'a dyn Intensity,
    gen: &'a GeneratorMatrix,
) -> LikelihoodRatioField<'a> {
    LikelihoodRatioField { intensity, gen }
}

impl LikelihoodRatioField<'_> {
    /// Row of `ell` out of `x(t-)`, indexed like the generator states.
    pub fn ell_row(&self, t: f64, prefix: &Prefix, mean: f64, u: f64) -> Result<Vec<f64>> {
        let n = self.gen.n();
        let mut lambda = vec![0.0; n];
        self.intensity.rates_into(t, prefix, mean, u, &mut lambda);
        let i = self
            .gen
            .index_of(prefix.state_before(t))
            .ok_or_else(|| Error::InvalidInput("state outside generator support".into()))?;
        let mut out = vec![0.0; n];
        for j in 0..n {
            if j == i {
                continue;
            }
            let g = self.gen.rate(i, j);
            if g == 0.0 {
                if lambda[j] > 0.0 {
                    return Err(Error::UnsupportedTransition {
                        from: self.gen.states()[i],
                        to: self.gen.states()[j],
                    });
                }
            } else {
                out[j] = lambda[j] / g - 1.0;
            }
        }
        Ok(out)
    }
}

/// Inputs for density evaluation along a fixed path.
pub struct DensityInputs<'a> {
    pub intensity: &'a dyn Intensity,
    pub gen: &'a GeneratorMatrix,
    pub mean: Option<&'a MeanCurve>,
    pub control: &'a dyn ControlSignal,
}

impl DensityInputs<'_> {
    fn piecewise_constant(&self) -> bool {
        self.intensity.piecewise_constant() && self.control.piecewise_constant()
    }

    /// Controlled rate row out of `x(t-)`, indexed like the generator.
    fn row_at(&self, path: &JumpPath, t: f64, out: &mut [f64]) {
        let prefix = Prefix::of(path);
        let m = self.mean.map_or(0.0, |c| c.value_before(t));
        let u = self.control.value(t, &prefix);
        self.intensity.rates_into(t, &prefix, m, u, out);
    }
}

/// One constancy segment of the merged evaluation grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub t0: f64,
    pub t1: f64,
    /// State-list index of `x` on the open interval.
    pub state_index: usize,
}

/// Density values on a merged grid (caller grid plus all jump times).
///
/// `values` are exact at the nodes; the density is strictly positive
/// unless a realized jump had zero controlled rate, in which case
/// `vanished_at` records the first such time and the density is zero
/// from that node on.
#[derive(Debug, Clone)]
pub struct DensityTrajectory {
    nodes: Vec<f64>,
    /// log L(t_k): the cadlag value, including the jump factor at t_k.
    log_at: Vec<f64>,
    /// log L(t_k-): value just before the node.
    log_before: Vec<f64>,
    pub(crate) segments: Vec<Segment>,
    vanished_at: Option<f64>,
}

impl DensityTrajectory {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> Vec<f64> {
        self.log_at.iter().map(|l| l.exp()).collect()
    }

    /// First time a realized jump had zero controlled rate, if any.
    pub fn vanished_at(&self) -> Option<f64> {
        self.vanished_at
    }

    /// `L(T)`.
    pub fn terminal(&self) -> f64 {
        self.log_at.last().unwrap().exp()
    }

    /// `L(t)` at the largest node `<= t` (exact when `t` is a node).
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.nodes.partition_point(|&s| s <= t);
        self.log_at[k.saturating_sub(1)].exp()
    }

    /// Cadlag value at node index.
    pub(crate) fn value_at_node(&self, k: usize) -> f64 {
        self.log_at[k].exp()
    }

    /// Left limit at node index.
    pub(crate) fn value_before_node(&self, k: usize) -> f64 {
        self.log_before[k].exp()
    }

    /// Strict-positivity check; the flagged time otherwise.
    pub fn ensure_positive(&self, path: &JumpPath) -> Result<()> {
        match self.vanished_at {
            None => Ok(()),
            Some(t) => Err(Error::ZeroRateAtJump {
                t,
                from: path.state_before(t),
                to: path.state_at(t),
            }),
        }
    }

    /// Max over nodes of `|self - other|` (grids must match).
    pub fn sup_distance(&self, other: &DensityTrajectory) -> f64 {
        self.log_at
            .iter()
            .zip(&other.log_at)
            .map(|(a, b)| (a.exp() - b.exp()).abs())
            .fold(0.0, f64::max)
    }
}

/// Merge caller grid, mean grid and jump times into one sorted node list
/// covering `[0, T]`.
fn merged_nodes(path: &JumpPath, inputs: &DensityInputs, grid: &[f64]) -> Vec<f64> {
    let horizon = path.horizon();
    let mut nodes: Vec<f64> = Vec::with_capacity(grid.len() + path.events().len() + 2);
    nodes.push(0.0);
    nodes.extend(grid.iter().copied().filter(|&t| t > 0.0 && t < horizon));
    if let Some(mean) = inputs.mean {
        nodes.extend(
            mean.grid()
                .iter()
                .copied()
                .filter(|&t| t > 0.0 && t < horizon),
        );
    }
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
}

/// Integral over a segment of the total rate discrepancy
/// `sum_j (lambda_ij(s) - g_ij)`, for the exponent drift.
fn segment_gap_integral(
    path: &JumpPath,
    inputs: &DensityInputs,
    t0: f64,
    t1: f64,
    i: usize,
    row: &mut [f64],
) -> Result<f64> {
    let exit = inputs.gen.exit_rate(i);
    let total_at = |t: f64, row: &mut [f64]| -> Result<f64> {
        inputs.row_at(path, t, row);
        let mut total = 0.0;
        for (j, &lam) in row.iter().enumerate() {
            if j == i {
                continue;
            }
            if lam < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "negative controlled rate {lam} at t={t}"
                )));
            }
            if lam > 0.0 && inputs.gen.rate(i, j) == 0.0 {
                return Err(Error::UnsupportedTransition {
                    from: inputs.gen.states()[i],
                    to: inputs.gen.states()[j],
                });
            }
            total += lam;
        }
        Ok(total)
    };
    if inputs.piecewise_constant() {
        let mid = 0.5 * (t0 + t1);
        Ok((total_at(mid, row)? - exit) * (t1 - t0))
    } else {
        // Validate once at the midpoint, then integrate the scalar total.
        // The left endpoint is nudged into the interior so the row
        // reflects the segment's own state at a jump node.
        total_at(0.5 * (t0 + t1), row)?;
        let dim = row.len();
        let f = |t: f64| {
            let mut s = vec![0.0; dim];
            inputs.row_at(path, t, &mut s);
            s.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .sum::<f64>()
                - exit
        };
        Ok(adaptive_simpson(
            &f,
            t0 + 1e-12 * (t1 - t0),
            t1,
            SEGMENT_TOL,
        ))
    }
}

/// Evaluate the product-form density exactly at the given grid nodes and
/// at every jump time of the path.
///
/// A realized jump with zero controlled rate does not abort; it flags the
/// trajectory and the density is zero from that time on.
pub fn density_on_grid(
    path: &JumpPath,
    inputs: &DensityInputs,
    grid: &[f64],
) -> Result<DensityTrajectory> {
    let nodes = merged_nodes(path, inputs, grid);
    let n_states = inputs.gen.n();
    let mut row = vec![0.0; n_states];
    let mut log_at = Vec::with_capacity(nodes.len());
    let mut log_before = Vec::with_capacity(nodes.len());
    let mut segments = Vec::with_capacity(nodes.len() - 1);
    let mut log_l = 0.0;
    let mut vanished_at = None;
    log_before.push(0.0);
    log_at.push(0.0);

    let events = path.events();
    let mut next_event = 0usize;

    for w in nodes.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let state = path.state_at(t0);
        let i = inputs
            .gen
            .index_of(state)
            .ok_or_else(|| Error::InvalidInput("state outside generator support".into()))?;
        segments.push(Segment {
            t0,
            t1,
            state_index: i,
        });

        if vanished_at.is_none() {
            log_l -= segment_gap_integral(path, inputs, t0, t1, i, &mut row)?;
        }
        log_before.push(if vanished_at.is_none() {
            log_l
        } else {
            f64::NEG_INFINITY
        });

        // Jump factor if t1 is an event time.
        if next_event < events.len() && events[next_event].0 == t1 {
            let to = events[next_event].1;
            next_event += 1;
            if vanished_at.is_none() {
                let j = inputs
                    .gen
                    .index_of(to)
                    .ok_or_else(|| Error::InvalidInput("state outside generator support".into()))?;
                inputs.row_at(path, t1, &mut row);
                let lam = row[j];
                let g = inputs.gen.rate(i, j);
                if g == 0.0 && lam > 0.0 {
                    return Err(Error::UnsupportedTransition {
                        from: inputs.gen.states()[i],
                        to: inputs.gen.states()[j],
                    });
                }
                if lam <= 0.0 {
                    vanished_at = Some(t1);
                } else {
                    log_l += (lam / g).ln();
                }
            }
        }
        log_at.push(if vanished_at.is_none() {
            log_l
        } else {
            f64::NEG_INFINITY
        });
    }

    Ok(DensityTrajectory {
        nodes,
        log_at,
        log_before,
        segments,
        vanished_at,
    })
}

/// Product-form density at the path's own resolution (plus the mean grid
/// when one is supplied).
pub fn density_product(path: &JumpPath, inputs: &DensityInputs) -> Result<DensityTrajectory> {
    density_on_grid(path, inputs, &[0.0, path.horizon()])
}

/// Euler integration of the density SDE: exact multiplicative jumps
/// `L <- L (1 + ell_ij)` and explicit Euler for the compensator drift
/// `-L sum_j ell_ij g_ij ds` with steps of size at most `dt`.
pub fn density_sde_euler(
    path: &JumpPath,
    inputs: &DensityInputs,
    dt: f64,
) -> Result<DensityTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("euler step must be positive".into()));
    }
    let nodes = merged_nodes(path, inputs, &[0.0, path.horizon()]);
    let n_states = inputs.gen.n();
    let mut row = vec![0.0; n_states];
    let mut log_at = Vec::with_capacity(nodes.len());
    let mut log_before = Vec::with_capacity(nodes.len());
    let mut segments = Vec::with_capacity(nodes.len() - 1);
    let mut l = 1.0f64;
    let mut vanished_at = None;
    log_before.push(0.0);
    log_at.push(0.0);

    let events = path.events();
    let mut next_event = 0usize;

    for w in nodes.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let state = path.state_at(t0);
        let i = inputs
            .gen
            .index_of(state)
            .ok_or_else(|| Error::InvalidInput("state outside generator support".into()))?;
        segments.push(Segment {
            t0,
            t1,
            state_index: i,
        });
        let exit = inputs.gen.exit_rate(i);

        if vanished_at.is_none() {
            let steps = ((t1 - t0) / dt).ceil().max(1.0) as usize;
            let h = (t1 - t0) / steps as f64;
            for k in 0..steps {
                // Left endpoint, nudged into the segment interior at k=0
                // so the row reflects the post-jump state.
                let s = if k == 0 {
                    t0 + 1e-12 * (t1 - t0)
                } else {
                    t0 + k as f64 * h
                };
                inputs.row_at(path, s, &mut row);
                let total: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &v)| v)
                    .sum();
                // sum_j ell_ij g_ij = total lambda - exit rate of G.
                l -= l * (total - exit) * h;
            }
        }
        log_before.push(if vanished_at.is_none() {
            l.ln()
        } else {
            f64::NEG_INFINITY
        });

        if next_event < events.len() && events[next_event].0 == t1 {
            let to = events[next_event].1;
            next_event += 1;
            if vanished_at.is_none() {
                let j = inputs
                    .gen
                    .index_of(to)
                    .ok_or_else(|| Error::InvalidInput("state outside generator support".into()))?;
                inputs.row_at(path, t1, &mut row);
                let lam = row[j];
                let g = inputs.gen.rate(i, j);
                if g == 0.0 && lam > 0.0 {
                    return Err(Error::UnsupportedTransition {
                        from: inputs.gen.states()[i],
                        to: inputs.gen.states()[j],
                    });
                }
                if lam <= 0.0 {
                    vanished_at = Some(t1);
                } else {
                    l *= lam / g;
                }
            }
        }
        log_at.push(if vanished_at.is_none() {
            l.ln()
        } else {
            f64::NEG_INFINITY
        });
    }

    Ok(DensityTrajectory {
        nodes,
        log_at,
        log_before,
        segments,
        vanished_at,
    })
}

/// Martingale diagnostics for one tracked edge.
#[derive(Debug, Clone, Serialize)]
pub struct EdgeCheck {
    pub i: State,
    pub j: State,
    /// Sample mean of `L(T) M^u_ij(T)`.
    pub mean: f64,
    pub se: f64,
    pub pass: bool,
}

/// Monte-Carlo verification of the measure-change identities:
/// `E[L(T)] = 1` and `E[L(T) M^u_ij(T)] = 0` for each tracked edge.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    #[serde(rename = "mean_L")]
    pub mean_l: f64,
    #[serde(rename = "se_L")]
    pub se_l: f64,
    #[serde(rename = "pass_L")]
    pub pass_l: bool,
    pub per_edge: Vec<EdgeCheck>,
    pub n_paths: usize,
}

impl MartingaleReport {
    pub fn all_pass(&self) -> bool {
        self.pass_l && self.per_edge.iter().all(|e| e.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Simulate under the reference measure and check that the density is a
/// mean-one weight and that reweighted compensated counts vanish.
///
/// Tracked edges are all `(i, j)` with `g_ij > 0`. The compensated count
/// under the controlled measure is
/// `M^u_ij(T) = N_ij(T) - int I_i(s) lambda_ij(s) ds`.
#[allow(clippy::too_many_arguments)]
pub fn martingale_checks(
    intensity: &dyn Intensity,
    gen: &GeneratorMatrix,
    control: &dyn ControlSignal,
    mean: Option<&MeanCurve>,
    x0: State,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    if n_paths < 2 {
        return Err(Error::InsufficientPaths(n_paths));
    }
    let ref_intensity = GeneratorIntensity::new(gen);
    let paths = simulate_batch(
        &ref_intensity,
        None,
        &ConstantControl(0.0),
        &InitialLaw::Point(x0),
        horizon,
        n_paths,
        seed,
    )?;

    let n = gen.n();
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && gen.rate(i, j) > 0.0)
        .collect();

    struct PathOut {
        weight: f64,
        weighted_m: Vec<f64>,
    }

    let inputs = DensityInputs {
        intensity,
        gen,
        mean,
        control,
    };
    let per_path: Vec<PathOut> = paths
        .par_iter()
        .map(|path| {
            let traj = density_on_grid(path, &inputs, &[0.0, horizon]).expect("density");
            let weight = traj.terminal();
            // int I_i lambda_ij ds per edge, on the same segments.
            let mut comp = vec![0.0; edges.len()];
            let mut row = vec![0.0; n];
            for seg in &traj.segments {
                let mid = 0.5 * (seg.t0 + seg.t1);
                inputs.row_at(path, mid, &mut row);
                for (e, &(i, j)) in edges.iter().enumerate() {
                    if i == seg.state_index {
                        if inputs.piecewise_constant() {
                            comp[e] += row[j] * (seg.t1 - seg.t0);
                        } else {
                            let f = |t: f64| {
                                let mut s = vec![0.0; n];
                                inputs.row_at(path, t, &mut s);
                                s[j]
                            };
                            let a = seg.t0 + 1e-12 * (seg.t1 - seg.t0);
                            comp[e] += adaptive_simpson(&f, a, seg.t1, SEGMENT_TOL);
                        }
                    }
                }
            }
            let stats = path_statistics(path);
            let weighted_m = edges
                .iter()
                .enumerate()
                .map(|(e, &(i, j))| {
                    let count = stats
                        .counts
                        .get(&(gen.states()[i], gen.states()[j]))
                        .copied()
                        .unwrap_or(0) as f64;
                    weight * (count - comp[e])
                })
                .collect();
            PathOut { weight, weighted_m }
        })
        .collect();

    let weights: Vec<f64> = per_path.iter().map(|p| p.weight).collect();
    let (mean_l, se_l) = mean_se(&weights);
    let pass_l = (mean_l - 1.0).abs() <= 3.0 * se_l;

    let per_edge = edges
        .iter()
        .enumerate()
        .map(|(e, &(i, j))| {
            let vals: Vec<f64> = per_path.iter().map(|p| p.weighted_m[e]).collect();
            let (m, se) = mean_se(&vals);
            EdgeCheck {
                i: gen.states()[i],
                j: gen.states()[j],
                mean: m,
                se,
                pass: m.abs() <= 3.0 * se || (m.abs() < 1e-14 && se < 1e-14),
            }
        })
        .collect();

    Ok(MartingaleReport {
        mean_l,
        se_l,
        pass_l,
        per_edge,
        n_paths,
    })
}
