//! Costate machinery: the state-indexed backward field, Hamiltonian
//! evaluation and maximization, and first-order stationarity checks.
//!
//! The costate pair is represented Markovianly through a field
//! `phi(t, i)` with `p(t) = phi(t, x(t))` and jump coefficients
//! `q_ij(t) = phi(t, j) - phi(t, i)`; the field solves a backward ODE
//! `d phi_i / dt = -driver(t, i, q-row, mean)` from a terminal condition,
//! integrated with classical RK4 at the grid spacing.

use crate::chain::{ControlSignal, GeneratorMatrix, Intensity, JumpPath, Prefix, State};
use crate::error::{Error, Result};
use crate::meanfield::MeanCurve;
use crate::numeric::fmt_f64;
use serde::Serialize;
use std::io::Write;

/// `<m, n>_g` at state index `i`: `sum_{j != i} m_j n_j g_ij`.
pub fn g_inner(m_row: &[f64], n_row: &[f64], gen: &GeneratorMatrix, i: usize) -> f64 {
    let mut acc = 0.0;
    for j in 0..gen.n() {
        if j != i {
            acc += m_row[j] * n_row[j] * gen.rate(i, j);
        }
    }
    acc
}

/// Backward equation data: the dt-coefficient as a function of
/// `(t, state index, q-row, mean at t)`, the terminal field, and an
/// optional mean curve feeding both (interpolated linearly so RK4 can
/// evaluate at half steps).
type DriverFn = Box<dyn Fn(f64, usize, &[f64], Option<f64>) -> f64 + Sync + Send>;
type TerminalFn = Box<dyn Fn(usize, Option<f64>) -> f64 + Sync + Send>;

pub struct DriverSpec {
    driver: DriverFn,
    terminal: TerminalFn,
    mean: Option<MeanCurve>,
}

impl DriverSpec {
    pub fn new(
        driver: impl Fn(f64, usize, &[f64], Option<f64>) -> f64 + Sync + Send + 'static,
        terminal: impl Fn(usize, Option<f64>) -> f64 + Sync + Send + 'static,
    ) -> Self {
        DriverSpec {
            driver: Box::new(driver),
            terminal: Box::new(terminal),
            mean: None,
        }
    }

    pub fn with_mean(mut self, mean: MeanCurve) -> Self {
        self.mean = Some(mean);
        self
    }

    fn mean_at(&self, t: f64) -> Option<f64> {
        self.mean.as_ref().map(|c| c.interpolate(t))
    }
}

/// The solved field `phi` on a time grid times the state list.
#[derive(Debug, Clone)]
pub struct AdjointField {
    grid: Vec<f64>,
    states: Vec<State>,
    /// `phi[k][i]` at grid node `k`, state-list index `i`.
    phi: Vec<Vec<f64>>,
}

impl AdjointField {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn phi(&self, node: usize, state_index: usize) -> f64 {
        self.phi[node][state_index]
    }

    /// `q_ij = phi_j - phi_i` at a grid node.
    pub fn q(&self, node: usize, i: usize, j: usize) -> f64 {
        self.phi[node][j] - self.phi[node][i]
    }

    /// Full q-row out of state index `i` at a grid node.
    pub fn q_row(&self, node: usize, i: usize) -> Vec<f64> {
        let base = self.phi[node][i];
        self.phi[node].iter().map(|&p| p - base).collect()
    }

    /// Node for left-limit lookups: the value on `(t_k, t_{k+1}]` is the
    /// one stored at `k`, matching the mean-curve convention.
    pub fn node_before(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g < t);
        k.saturating_sub(1).min(self.phi.len() - 1)
    }

    pub fn terminal_values(&self) -> &[f64] {
        self.phi.last().unwrap()
    }

    /// Max over nodes and states of `|self - other|` (matching grids).
    pub fn sup_distance(&self, other: &AdjointField) -> f64 {
        let mut d = 0.0f64;
        for (a, b) in self.phi.iter().zip(&other.phi) {
            for (x, y) in a.iter().zip(b) {
                d = d.max((x - y).abs());
            }
        }
        d
    }

    /// CSV serialization: header `t,state,phi`, rows grouped by time.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t,state,phi")?;
        for (k, t) in self.grid.iter().enumerate() {
            for (i, s) in self.states.iter().enumerate() {
                writeln!(w, "{},{},{}", fmt_f64(*t), s, fmt_f64(self.phi[k][i]))?;
            }
        }
        Ok(())
    }
}

/// Integrate the state-indexed backward ODE with classical RK4 at the
/// grid spacing. The terminal node carries the terminal condition
/// exactly as supplied.
pub fn solve_adjoint_ode(
    spec: &DriverSpec,
    gen: &GeneratorMatrix,
    grid: &[f64],
) -> Result<AdjointField> {
    let k_nodes = grid.len();
    if k_nodes < 2 {
        return Err(Error::InvalidInput(
            "adjoint grid needs at least 2 nodes".into(),
        ));
    }
    let n = gen.n();
    let horizon = grid[k_nodes - 1];

    let rhs = |t: f64, phi: &[f64], out: &mut [f64]| {
        let mean = spec.mean_at(t);
        for i in 0..n {
            let base = phi[i];
            let q_row: Vec<f64> = phi.iter().map(|&p| p - base).collect();
            out[i] = -(spec.driver)(t, i, &q_row, mean);
        }
    };

    let mut phi_all = vec![vec![0.0; n]; k_nodes];
    let term_mean = spec.mean_at(horizon);
    for (i, slot) in phi_all[k_nodes - 1].iter_mut().enumerate() {
        *slot = (spec.terminal)(i, term_mean);
    }

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];

    for k in (1..k_nodes).rev() {
        let t1 = grid[k];
        let t0 = grid[k - 1];
        let h = t1 - t0;
        let phi1 = phi_all[k].clone();

        rhs(t1, &phi1, &mut k1);
        for i in 0..n {
            stage[i] = phi1[i] - 0.5 * h * k1[i];
        }
        rhs(t1 - 0.5 * h, &stage, &mut k2);
        for i in 0..n {
            stage[i] = phi1[i] - 0.5 * h * k2[i];
        }
        rhs(t1 - 0.5 * h, &stage, &mut k3);
        for i in 0..n {
            stage[i] = phi1[i] - h * k3[i];
        }
        rhs(t0, &stage, &mut k4);

        for i in 0..n {
            phi_all[k - 1][i] = phi1[i] - h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if phi_all[k - 1].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteField { t: t0 });
        }
    }

    Ok(AdjointField {
        grid: grid.to_vec(),
        states: gen.states().to_vec(),
        phi: phi_all,
    })
}

/// Hamiltonian at a fixed `(t, state, mean)`: callers pre-bind the rate
/// row and running cost as functions of the control value alone.
pub struct Hamiltonian<'a> {
    pub gen: &'a GeneratorMatrix,
    pub state_index: usize,
    /// Fills the controlled rate row for a control value.
    pub rates_at: &'a (dyn Fn(f64, &mut [f64]) + Sync),
    /// Running cost at this `(t, state, mean)` for a control value.
    pub running: &'a (dyn Fn(f64) -> f64 + Sync),
}

/// `H(t, v) = L (<ell(v), q>_g - f(v))`, using
/// `<ell(v), q>_g = sum_{j != i} (lambda_ij(v) - g_ij) q_j`.
pub fn hamiltonian_value(h: &Hamiltonian, v: f64, l_weight: f64, q_row: &[f64]) -> f64 {
    let n = h.gen.n();
    let mut row = vec![0.0; n];
    (h.rates_at)(v, &mut row);
    let mut inner = 0.0;
    for j in 0..n {
        if j != h.state_index {
            inner += (row[j] - h.gen.rate(h.state_index, j)) * q_row[j];
        }
    }
    l_weight * (inner - (h.running)(v))
}

/// Relative tolerance used to decide a sampled Hamiltonian is quadratic.
const QUADRATIC_FIT_TOL: f64 = 1e-9;

/// Maximize the Hamiltonian over a closed control interval.
///
/// A quadratic profile (the affine-rate, quadratic-penalty case) is
/// detected by sampling and resolved by its clipped vertex; anything else
/// falls back to a dense scan plus golden-section refinement. Exact ties
/// resolve to the smallest maximizer. The positive weight `L` cannot move
/// the argmax and is fixed to 1 here.
pub fn maximize_hamiltonian(h: &Hamiltonian, q_row: &[f64], u_lo: f64, u_hi: f64) -> Result<f64> {
    if u_lo > u_hi {
        return Err(Error::EmptyControlSet { lo: u_lo, hi: u_hi });
    }
    if u_lo == u_hi {
        return Ok(u_lo);
    }
    let eval = |v: f64| hamiltonian_value(h, v, 1.0, q_row);
    let w = u_hi - u_lo;
    let mid = u_lo + 0.5 * w;
    let f_lo = eval(u_lo);
    let f_mid = eval(mid);
    let f_hi = eval(u_hi);
    // Newton divided differences through (lo, mid, hi).
    let d1 = (f_mid - f_lo) / (mid - u_lo);
    let d2 = ((f_hi - f_mid) / (u_hi - mid) - d1) / (u_hi - u_lo);
    let predict = |v: f64| f_lo + d1 * (v - u_lo) + d2 * (v - u_lo) * (v - mid);
    let scale = f_lo.abs().max(f_mid.abs()).max(f_hi.abs()).max(1.0);
    let p1 = u_lo + 0.25 * w;
    let p2 = u_lo + 0.75 * w;
    let quadratic = (predict(p1) - eval(p1)).abs() <= QUADRATIC_FIT_TOL * scale
        && (predict(p2) - eval(p2)).abs() <= QUADRATIC_FIT_TOL * scale;

    if quadratic {
        let curv_scale = scale / (w * w);
        let slope_scale = scale / w;
        if d2.abs() <= QUADRATIC_FIT_TOL * curv_scale {
            // Affine (or constant): maximum at a boundary, ties to lo.
            return Ok(if d1 > QUADRATIC_FIT_TOL * slope_scale {
                u_hi
            } else {
                u_lo
            });
        }
        if d2 < 0.0 {
            let vertex = 0.5 * (u_lo + mid) - d1 / (2.0 * d2);
            return Ok(vertex.clamp(u_lo, u_hi));
        }
        // Convex: boundary maximum, smallest argument wins ties.
        return Ok(if f_hi > f_lo { u_hi } else { u_lo });
    }

    // Dense scan, then golden-section inside the best bracket.
    let scan = 128usize;
    let mut best_k = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for k in 0..=scan {
        let v = u_lo + w * k as f64 / scan as f64;
        let f = eval(v);
        if f > best_v {
            best_v = f;
            best_k = k;
        }
    }
    let mut a = u_lo + w * best_k.saturating_sub(1) as f64 / scan as f64;
    let mut b = u_lo + w * (best_k + 1).min(scan) as f64 / scan as f64;
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    while b - a > 1e-10 * w.max(1.0) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d);
        }
    }
    let interior = 0.5 * (a + b);
    // Boundary candidates beat interior ties from below.
    let mut best = (interior, eval(interior));
    for cand in [u_hi, u_lo] {
        let f = eval(cand);
        if f > best.1 + 1e-12 * scale || (f >= best.1 - 1e-12 * scale && cand < best.0) {
            best = (cand, f);
        }
    }
    Ok(best.0)
}

/// First-order condition diagnostics along sampled paths.
#[derive(Debug, Clone, Serialize)]
pub struct StationarityReport {
    pub max_abs_derivative: f64,
    /// Fraction of samples with `|dH/dv| <= 1e-6 * max(1, |u|)`.
    pub fraction_within: f64,
    pub n_samples: usize,
}

impl StationarityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Evaluate `dH/dv` at the control by central finite differences at the
/// midpoints of the field grid cells along each path.
#[allow(clippy::too_many_arguments)]
pub fn check_stationarity(
    field: &AdjointField,
    intensity: &dyn Intensity,
    gen: &GeneratorMatrix,
    running: &(dyn Fn(f64, State, f64) -> f64 + Sync),
    control: &dyn ControlSignal,
    mean: Option<&MeanCurve>,
    paths: &[JumpPath],
) -> StationarityReport {
    let grid = field.grid();
    let mut max_abs = 0.0f64;
    let mut within = 0usize;
    let mut count = 0usize;

    for path in paths {
        let prefix = Prefix::of(path);
        for cell in 0..grid.len() - 1 {
            let t = 0.5 * (grid[cell] + grid[cell + 1]);
            if t >= path.horizon() {
                continue;
            }
            let state = prefix.state_before(t);
            let i = match gen.index_of(state) {
                Some(i) => i,
                None => continue,
            };
            let m = mean.map_or(0.0, |c| c.value_before(t));
            let u = control.value(t, &prefix);
            let q_row = field.q_row(field.node_before(t), i);
            let rates_at = |v: f64, out: &mut [f64]| {
                intensity.rates_into(t, &prefix, m, v, out);
            };
            let run = |v: f64| running(t, state, v);
            let ham = Hamiltonian {
                gen,
                state_index: i,
                rates_at: &rates_at,
                running: &run,
            };
            let scale = u.abs().max(1.0);
            let delta = 1e-6 * scale;
            let hp = hamiltonian_value(&ham, u + delta, 1.0, &q_row);
            let hm = hamiltonian_value(&ham, u - delta, 1.0, &q_row);
            let deriv = (hp - hm) / (2.0 * delta);
            max_abs = max_abs.max(deriv.abs());
            if deriv.abs() <= 1e-6 * scale {
                within += 1;
            }
            count += 1;
        }
    }
    StationarityReport {
        max_abs_derivative: max_abs,
        fraction_within: if count > 0 {
            within as f64 / count as f64
        } else {
            1.0
        },
        n_samples: count,
    }
}
