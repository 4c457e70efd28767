//! Reference-measure Markov chain machinery.
//!
//! A finite truncation of the countable state space carries a constant
//! Q-matrix `G`. Paths are sampled exactly by thinning against a constant
//! rate majorant, so time-, path- and mean-dependent intensities are all
//! handled by the same sampler. Counting, occupation and martingale
//! statistics are computed exactly on the piecewise-constant paths.

use crate::error::{Error, Result};
use crate::meanfield::MeanCurve;
use crate::numeric::fmt_f64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;

/// States are nonnegative integers (a truncation of {0, 1, 2, ...}).
pub type State = usize;

/// Tolerance for accepting a caller-supplied diagonal before it is
/// recomputed exactly.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// A validated Q-matrix on an ordered finite state list.
///
/// Off-diagonal entries are nonnegative jump rates; the diagonal is
/// recomputed on construction so every row sums to zero exactly.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    states: Vec<State>,
    rates: Vec<f64>,
    n: usize,
}

/// Validate a rate matrix against the Q-matrix contract.
///
/// The caller's diagonal must already be within [`ROW_SUM_TOL`] of the
/// negative off-diagonal row sum; it is then replaced by the exact value.
pub fn validate_generator(rates: &[Vec<f64>], states: &[State]) -> Result<GeneratorMatrix> {
    let n = states.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty state list".into()));
    }
    if rates.len() != n || rates.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput(format!(
            "rate matrix must be {n}x{n} to match the state list"
        )));
    }
    let mut sorted = states.to_vec();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::InvalidInput("duplicate states".into()));
    }

    let mut flat = vec![0.0; n * n];
    for i in 0..n {
        let mut off_sum = 0.0;
        for j in 0..n {
            let v = rates[i][j];
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite rate at ({i},{j})")));
            }
            if i != j {
                if v < 0.0 {
                    return Err(Error::NegativeRate {
                        from: states[i],
                        to: states[j],
                        value: v,
                    });
                }
                off_sum += v;
                flat[i * n + j] = v;
            }
        }
        let row_sum = rates[i][i] + off_sum;
        if row_sum.abs() > ROW_SUM_TOL {
            return Err(Error::RowSumViolation {
                row: i,
                sum: row_sum,
            });
        }
        flat[i * n + i] = -off_sum;
    }
    Ok(GeneratorMatrix {
        states: states.to_vec(),
        rates: flat,
        n,
    })
}

impl GeneratorMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    /// Index of a state value in the ordered state list.
    pub fn index_of(&self, state: State) -> Option<usize> {
        self.states.iter().position(|&s| s == state)
    }

    /// Rate by state-list indices.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rates[i * self.n..(i + 1) * self.n]
    }

    /// Total exit rate out of state index `i` (`-g_ii`).
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rate(i, i)
    }

    /// `(Gf)(i) = sum_j g_ij (f(j) - f(i))` by state-list index.
    pub fn apply<F: Fn(State) -> f64>(&self, f: &F, i: usize) -> f64 {
        let fi = f(self.states[i]);
        let mut acc = 0.0;
        for j in 0..self.n {
            if j != i {
                acc += self.rate(i, j) * (f(self.states[j]) - fi);
            }
        }
        acc
    }
}

/// One realized trajectory: initial state, jump events, horizon.
///
/// The reconstruction `x(t)` is piecewise constant and right continuous;
/// event times are strictly increasing in `(0, T]` and every event is a
/// genuine jump.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    x0: State,
    events: Vec<(f64, State)>,
    horizon: f64,
}

impl JumpPath {
    pub fn new(x0: State, events: Vec<(f64, State)>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidPath(format!(
                "horizon {horizon} must be positive"
            )));
        }
        let mut prev_t = 0.0;
        let mut prev_s = x0;
        for &(t, s) in &events {
            if !(t > prev_t) || t > horizon {
                return Err(Error::InvalidPath(format!(
                    "event time {t} not strictly increasing within (0, {horizon}]"
                )));
            }
            if s == prev_s {
                return Err(Error::InvalidPath(format!("event at t={t} is not a jump")));
            }
            prev_t = t;
            prev_s = s;
        }
        Ok(JumpPath {
            x0,
            events,
            horizon,
        })
    }

    pub fn x0(&self) -> State {
        self.x0
    }

    pub fn events(&self) -> &[(f64, State)] {
        &self.events
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Right-continuous value `x(t)`.
    pub fn state_at(&self, t: f64) -> State {
        match self.events.partition_point(|&(s, _)| s <= t) {
            0 => self.x0,
            k => self.events[k - 1].1,
        }
    }

    /// Left limit `x(t-)`.
    pub fn state_before(&self, t: f64) -> State {
        match self.events.partition_point(|&(s, _)| s < t) {
            0 => self.x0,
            k => self.events[k - 1].1,
        }
    }

    /// Terminal value `x(T)`.
    pub fn terminal_state(&self) -> State {
        self.events.last().map_or(self.x0, |&(_, s)| s)
    }

    /// Constancy segments `(t0, t1, state)` covering `[0, T]`.
    pub fn segments(&self) -> Vec<(f64, f64, State)> {
        let mut out = Vec::with_capacity(self.events.len() + 1);
        let mut t0 = 0.0;
        let mut s = self.x0;
        for &(t, next) in &self.events {
            out.push((t0, t, s));
            t0 = t;
            s = next;
        }
        out.push((t0, self.horizon, s));
        out
    }

    /// CSV serialization: header `time,state`, first row at time zero,
    /// one row per event, floats with 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "time,state")?;
        writeln!(w, "{},{}", fmt_f64(0.0), self.x0)?;
        for &(t, s) in &self.events {
            writeln!(w, "{},{}", fmt_f64(t), s)?;
        }
        Ok(())
    }
}

/// Read-only view of a trajectory prefix, as seen by predictable
/// evaluations at time `t`: callers may only query strictly before `t`.
#[derive(Debug, Clone, Copy)]
pub struct Prefix<'a> {
    x0: State,
    events: &'a [(f64, State)],
}

impl<'a> Prefix<'a> {
    pub fn new(x0: State, events: &'a [(f64, State)]) -> Self {
        Prefix { x0, events }
    }

    pub fn of(path: &'a JumpPath) -> Self {
        Prefix {
            x0: path.x0,
            events: &path.events,
        }
    }

    /// Left limit `x(t-)`.
    pub fn state_before(&self, t: f64) -> State {
        match self.events.partition_point(|&(s, _)| s < t) {
            0 => self.x0,
            k => self.events[k - 1].1,
        }
    }
}

/// Controlled jump intensity `lambda_ij(t, x, m, u)` on a fixed support.
///
/// `rates_into` fills the full row out of the pre-jump state `x(t-)`,
/// indexed like `support()`, with the diagonal entry left at zero.
/// Implementations may read the path only through the prefix (up to t-).
pub trait Intensity: Sync {
    fn support(&self) -> &[State];

    fn rates_into(&self, t: f64, prefix: &Prefix, mean: f64, u: f64, out: &mut [f64]);

    /// A constant majorant of the total exit rate over all admissible
    /// (t, path, mean, control) combinations.
    fn rate_bound(&self) -> f64;

    /// Whether the row is constant in `t` between consecutive nodes of
    /// any evaluation grid that refines the mean grid and the jump times.
    /// Enables exact piecewise integration; defaults to the safe answer.
    fn piecewise_constant(&self) -> bool {
        false
    }
}

/// The reference chain itself: `lambda = G`, ignoring mean and control.
#[derive(Debug, Clone)]
pub struct GeneratorIntensity<'a> {
    gen: &'a GeneratorMatrix,
}

impl<'a> GeneratorIntensity<'a> {
    pub fn new(gen: &'a GeneratorMatrix) -> Self {
        GeneratorIntensity { gen }
    }
}

impl Intensity for GeneratorIntensity<'_> {
    fn support(&self) -> &[State] {
        self.gen.states()
    }

    fn rates_into(&self, t: f64, prefix: &Prefix, _mean: f64, _u: f64, out: &mut [f64]) {
        let i = self
            .gen
            .index_of(prefix.state_before(t))
            .expect("path state outside generator support");
        out.copy_from_slice(self.gen.row(i));
        out[i] = 0.0;
    }

    fn rate_bound(&self) -> f64 {
        (0..self.gen.n())
            .map(|i| self.gen.exit_rate(i))
            .fold(0.0, f64::max)
    }

    fn piecewise_constant(&self) -> bool {
        true
    }
}

/// Progressively measurable control signal; reads the path up to t-.
pub trait ControlSignal: Sync {
    fn value(&self, t: f64, prefix: &Prefix) -> f64;

    /// Constant between grid nodes and path jump times (see
    /// [`Intensity::piecewise_constant`]).
    fn piecewise_constant(&self) -> bool {
        false
    }
}

/// Constant-in-time control.
#[derive(Debug, Clone, Copy)]
pub struct ConstantControl(pub f64);

impl ControlSignal for ConstantControl {
    fn value(&self, _t: f64, _prefix: &Prefix) -> f64 {
        self.0
    }

    fn piecewise_constant(&self) -> bool {
        true
    }
}

/// Markovian feedback `u(t) = phi(t, x(t-))`.
pub struct FeedbackControl<F: Fn(f64, State) -> f64 + Sync> {
    f: F,
    piecewise_constant: bool,
}

impl<F: Fn(f64, State) -> f64 + Sync> FeedbackControl<F> {
    /// Feedback that is constant in `t` for fixed state.
    pub fn stationary(f: F) -> Self {
        FeedbackControl {
            f,
            piecewise_constant: true,
        }
    }

    /// Feedback whose time dependence comes only through left-limit
    /// lookups of grid curves, so it is constant between grid nodes and
    /// jump times.
    pub fn piecewise(f: F) -> Self {
        FeedbackControl {
            f,
            piecewise_constant: true,
        }
    }

    /// Feedback with arbitrary time dependence.
    pub fn time_varying(f: F) -> Self {
        FeedbackControl {
            f,
            piecewise_constant: false,
        }
    }
}

impl<F: Fn(f64, State) -> f64 + Sync> ControlSignal for FeedbackControl<F> {
    fn value(&self, t: f64, prefix: &Prefix) -> f64 {
        (self.f)(t, prefix.state_before(t))
    }

    fn piecewise_constant(&self) -> bool {
        self.piecewise_constant
    }
}

/// Control tabulated per (grid cell, state); the value on `(t_k, t_{k+1}]`
/// is the row stored at `k` (left-limit convention, like mean curves).
#[derive(Debug, Clone)]
pub struct TabulatedControl {
    grid: Vec<f64>,
    states: Vec<State>,
    /// `values[k][s]` for cell k and state-list index s.
    values: Vec<Vec<f64>>,
}

impl TabulatedControl {
    pub fn new(grid: Vec<f64>, states: Vec<State>, values: Vec<Vec<f64>>) -> Result<Self> {
        if grid.len() < 2 || values.len() + 1 != grid.len() {
            return Err(Error::InvalidInput(
                "tabulated control needs one value row per grid cell".into(),
            ));
        }
        if values.iter().any(|v| v.len() != states.len()) {
            return Err(Error::InvalidInput(
                "tabulated control rows must match the state list".into(),
            ));
        }
        Ok(TabulatedControl {
            grid,
            states,
            values,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn cell_values(&self) -> &[Vec<f64>] {
        &self.values
    }

    fn cell_of(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g < t);
        k.saturating_sub(1).min(self.values.len() - 1)
    }
}

impl ControlSignal for TabulatedControl {
    fn value(&self, t: f64, prefix: &Prefix) -> f64 {
        let s = prefix.state_before(t);
        let idx = self
            .states
            .iter()
            .position(|&x| x == s)
            .expect("path state outside control table");
        self.values[self.cell_of(t)][idx]
    }

    fn piecewise_constant(&self) -> bool {
        true
    }
}

/// `base + eps * direction`, used by perturbation probes.
pub struct PerturbedControl<'a> {
    pub base: &'a dyn ControlSignal,
    pub direction: &'a dyn ControlSignal,
    pub eps: f64,
}

impl ControlSignal for PerturbedControl<'_> {
    fn value(&self, t: f64, prefix: &Prefix) -> f64 {
        self.base.value(t, prefix) + self.eps * self.direction.value(t, prefix)
    }

    fn piecewise_constant(&self) -> bool {
        self.base.piecewise_constant() && self.direction.piecewise_constant()
    }
}

/// Initial distribution of `x(0)`.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    Point(State),
    /// Pairs `(state, probability)`; probabilities must sum to 1.
    Categorical(Vec<(State, f64)>),
}

impl InitialLaw {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> State {
        match self {
            InitialLaw::Point(s) => *s,
            InitialLaw::Categorical(pairs) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for &(s, p) in pairs {
                    acc += p;
                    if u < acc {
                        return s;
                    }
                }
                pairs.last().expect("empty categorical law").0
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let InitialLaw::Categorical(pairs) = self {
            if pairs.is_empty() {
                return Err(Error::InvalidInput("empty categorical law".into()));
            }
            let total: f64 = pairs.iter().map(|&(_, p)| p).sum();
            if pairs.iter().any(|&(_, p)| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "categorical probabilities sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Per-path RNG stream: one master seed, one counter-based stream per
/// path index, so batches are reproducible at any parallelism.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Exact-law sample of the controlled chain by thinning.
///
/// Candidate event times come from an exponential clock at the majorant
/// rate; a candidate at `t` becomes a jump to `j` with probability
/// `lambda_ij(t)/Lambda`. Identical `(seed, inputs)` give identical paths.
pub fn simulate_path(
    intensity: &dyn Intensity,
    mean: Option<&MeanCurve>,
    control: &dyn ControlSignal,
    x0: State,
    horizon: f64,
    seed: u64,
) -> Result<JumpPath> {
    let mut rng = path_rng(seed, 0);
    simulate_path_with_rng(intensity, mean, control, x0, horizon, &mut rng)
}

/// As [`simulate_path`] but drawing from a caller-provided stream.
pub fn simulate_path_with_rng(
    intensity: &dyn Intensity,
    mean: Option<&MeanCurve>,
    control: &dyn ControlSignal,
    x0: State,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<JumpPath> {
    let support = intensity.support();
    let bound = intensity.rate_bound();
    if !(bound >= 0.0) || !bound.is_finite() {
        return Err(Error::InvalidInput(format!(
            "rate majorant {bound} must be finite and >= 0"
        )));
    }
    let mut events: Vec<(f64, State)> = Vec::new();
    let mut row = vec![0.0; support.len()];

    if bound > 0.0 {
        let mut t = 0.0;
        loop {
            // Exponential(bound) inter-arrival for the majorant clock.
            let u: f64 = rng.random();
            t += -(1.0 - u).ln() / bound;
            if t >= horizon {
                break;
            }
            // A zero-width clock tick cannot form a strictly increasing
            // event; drop the candidate.
            if events.last().is_some_and(|&(s, _)| s >= t) {
                continue;
            }
            let prefix = Prefix::new(x0, &events);
            let m = mean.map_or(0.0, |c| c.value_before(t));
            let u_ctrl = control.value(t, &prefix);
            intensity.rates_into(t, &prefix, m, u_ctrl, &mut row);
            let total: f64 = row.iter().sum();
            if total > bound * (1.0 + 1e-12) {
                return Err(Error::MajorantViolation { t, total, bound });
            }
            // Accept a jump to state j with probability row[j]/bound.
            let v: f64 = rng.random::<f64>() * bound;
            let mut acc = 0.0;
            let cur = prefix.state_before(t);
            for (j, &r) in row.iter().enumerate() {
                if support[j] == cur {
                    continue;
                }
                acc += r;
                if v < acc {
                    events.push((t, support[j]));
                    break;
                }
            }
        }
    }
    JumpPath::new(x0, events, horizon)
}

/// Simulate `n` paths with per-path streams derived from `seed`.
/// The result is identical for any rayon thread count.
pub fn simulate_batch(
    intensity: &dyn Intensity,
    mean: Option<&MeanCurve>,
    control: &dyn ControlSignal,
    initial: &InitialLaw,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<JumpPath>> {
    initial.validate()?;
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = path_rng(seed, k as u64);
            let x0 = initial.sample(&mut rng);
            simulate_path_with_rng(intensity, mean, control, x0, horizon, &mut rng)
        })
        .collect()
}

/// Jump counts, occupation times and the representation residual.
#[derive(Debug, Clone)]
pub struct PathStatistics {
    /// `N_ij(T)` for every realized ordered pair.
    pub counts: BTreeMap<(State, State), u64>,
    /// Occupation time of each visited state.
    pub occupation: BTreeMap<State, f64>,
    /// `x(T) - x(0) - sum_{i != j} (j - i) N_ij(T)`; zero for any valid path.
    pub representation_residual: i64,
}

/// Exact counting and occupation statistics along a path.
pub fn path_statistics(path: &JumpPath) -> PathStatistics {
    let mut counts: BTreeMap<(State, State), u64> = BTreeMap::new();
    let mut occupation: BTreeMap<State, f64> = BTreeMap::new();
    let mut jump_sum: i64 = 0;
    for (t0, t1, s) in path.segments() {
        *occupation.entry(s).or_insert(0.0) += t1 - t0;
    }
    let mut prev = path.x0();
    for &(_, s) in path.events() {
        *counts.entry((prev, s)).or_insert(0) += 1;
        jump_sum += s as i64 - prev as i64;
        prev = s;
    }
    let residual = path.terminal_state() as i64 - path.x0() as i64 - jump_sum;
    PathStatistics {
        counts,
        occupation,
        representation_residual: residual,
    }
}

/// Dynkin residual `M_T^f = f(x(T)) - f(x(0)) - int_0^T (Gf)(x(s)) ds`,
/// evaluated exactly on the piecewise-constant path.
pub fn dynkin_residual<F: Fn(State) -> f64>(path: &JumpPath, gen: &GeneratorMatrix, f: &F) -> f64 {
    let mut integral = 0.0;
    for (t0, t1, s) in path.segments() {
        let i = gen
            .index_of(s)
            .expect("path state outside generator support");
        integral += gen.apply(f, i) * (t1 - t0);
    }
    f(path.terminal_state()) - f(path.x0()) - integral
}

/// Optional and predictable variation of the accompanying martingale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationPair {
    /// `[M](T)`: each jump contributes exactly 1.
    pub optional: f64,
    /// `<M>(T) = sum_{i != j} int I_i(s) g_ij ds`.
    pub predictable: f64,
}

pub fn optional_variation(path: &JumpPath, gen: &GeneratorMatrix) -> VariationPair {
    let optional = path.events().len() as f64;
    let mut predictable = 0.0;
    for (t0, t1, s) in path.segments() {
        let i = gen
            .index_of(s)
            .expect("path state outside generator support");
        predictable += gen.exit_rate(i) * (t1 - t0);
    }
    VariationPair {
        optional,
        predictable,
    }
}
