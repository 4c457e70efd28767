//! Closed-form machinery for the shipped model problems: the two-state
//! chain with quadratic control penalty, its mean-field variant whose
//! mean curve solves a constrained Riccati equation, and a mean-field
//! birth-death (Schlogl-type) chain with a controlled death band.

use crate::adjoint::DriverSpec;
use crate::chain::{
    validate_generator, ControlSignal, FeedbackControl, GeneratorMatrix, InitialLaw, Intensity,
    Prefix, State,
};
use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::meanfield::MeanCurve;
use crate::numeric::fmt_f64;
use rayon::prelude::*;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

/// Two-state chain on `{a, b}`: uncontrolled up-rate `alpha`, controlled
/// down-rate, reference rates `g_ab`, `g_ba`, terminal cost `h`.
#[derive(Debug, Clone, Copy)]
pub struct TwoStateSpec {
    pub a: State,
    pub b: State,
    pub alpha: f64,
    pub g_ab: f64,
    pub g_ba: f64,
    pub h_a: f64,
    pub h_b: f64,
}

impl TwoStateSpec {
    pub fn new(
        a: State,
        b: State,
        alpha: f64,
        g_ab: f64,
        g_ba: f64,
        h_a: f64,
        h_b: f64,
    ) -> Result<Self> {
        if a >= b {
            return Err(Error::InvalidInput(format!("need a < b, got a={a}, b={b}")));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!(
                "alpha {alpha} must be positive"
            )));
        }
        if !(g_ab > 0.0 && g_ba > 0.0) {
            return Err(Error::InvalidInput(
                "reference rates must be positive".into(),
            ));
        }
        if h_b < h_a {
            return Err(Error::InvalidInput(format!(
                "terminal cost must satisfy h(b) >= h(a), got {h_b} < {h_a}"
            )));
        }
        Ok(TwoStateSpec {
            a,
            b,
            alpha,
            g_ab,
            g_ba,
            h_a,
            h_b,
        })
    }

    pub fn h(&self, s: State) -> f64 {
        if s == self.b {
            self.h_b
        } else {
            self.h_a
        }
    }

    pub fn generator(&self) -> GeneratorMatrix {
        validate_generator(
            &[vec![-self.g_ab, self.g_ab], vec![self.g_ba, -self.g_ba]],
            &[self.a, self.b],
        )
        .expect("two-state reference generator")
    }

    /// Initial law with mean `m0` on `{a, b}`.
    pub fn initial_law(&self, m0: f64) -> Result<InitialLaw> {
        let p_b = (m0 - self.a as f64) / (self.b as f64 - self.a as f64);
        if !(0.0..=1.0).contains(&p_b) {
            return Err(Error::InvalidInput(format!(
                "mean {m0} outside [{}, {}]",
                self.a, self.b
            )));
        }
        if p_b == 0.0 {
            Ok(InitialLaw::Point(self.a))
        } else if p_b == 1.0 {
            Ok(InitialLaw::Point(self.b))
        } else {
            Ok(InitialLaw::Categorical(vec![
                (self.a, 1.0 - p_b),
                (self.b, p_b),
            ]))
        }
    }
}

/// Controlled two-state intensity without mean coupling: rate `alpha`
/// out of `a`, rate `u` out of `b`.
pub struct TwoStateIntensity {
    support: [State; 2],
    alpha: f64,
    u_max: f64,
}

/// Mean-coupled two-state intensity: the down-rate is `u + mean`.
pub struct MeanTwoStateIntensity {
    support: [State; 2],
    alpha: f64,
    u_max: f64,
    mean_max: f64,
    floor_clips: AtomicU64,
}

pub fn ex1_intensity(spec: &TwoStateSpec, u_max: f64) -> TwoStateIntensity {
    TwoStateIntensity {
        support: [spec.a, spec.b],
        alpha: spec.alpha,
        u_max,
    }
}

impl Intensity for TwoStateIntensity {
    fn support(&self) -> &[State] {
        &self.support
    }

    fn rates_into(&self, t: f64, prefix: &Prefix, _mean: f64, u: f64, out: &mut [f64]) {
        out.fill(0.0);
        if prefix.state_before(t) == self.support[0] {
            out[1] = self.alpha;
        } else {
            out[0] = u;
        }
    }

    fn rate_bound(&self) -> f64 {
        self.alpha.max(self.u_max)
    }

    fn piecewise_constant(&self) -> bool {
        true
    }
}

pub fn ex2_intensity(spec: &TwoStateSpec, u_max: f64, mean_max: f64) -> MeanTwoStateIntensity {
    MeanTwoStateIntensity {
        support: [spec.a, spec.b],
        alpha: spec.alpha,
        u_max,
        mean_max,
        floor_clips: AtomicU64::new(0),
    }
}

impl MeanTwoStateIntensity {
    /// How many evaluations clamped a negative down-rate to zero.
    pub fn floor_clips(&self) -> u64 {
        self.floor_clips.load(Ordering::Relaxed)
    }
}

impl Intensity for MeanTwoStateIntensity {
    fn support(&self) -> &[State] {
        &self.support
    }

    fn rates_into(&self, t: f64, prefix: &Prefix, mean: f64, u: f64, out: &mut [f64]) {
        out.fill(0.0);
        if prefix.state_before(t) == self.support[0] {
            out[1] = self.alpha;
        } else {
            let rate = u + mean;
            if rate < 0.0 {
                self.floor_clips.fetch_add(1, Ordering::Relaxed);
                out[0] = 0.0;
            } else {
                out[0] = rate;
            }
        }
    }

    fn rate_bound(&self) -> f64 {
        self.alpha.max(self.u_max + self.mean_max)
    }

    fn piecewise_constant(&self) -> bool {
        true
    }
}

/// Optimal feedback for the mean-free two-state problem:
/// `u(t) = h(x(t-)) - h(a)`.
pub fn ex1_optimal_control(spec: &TwoStateSpec) -> impl ControlSignal {
    let s = *spec;
    FeedbackControl::stationary(move |_t, x| s.h(x) - s.h_a)
}

/// The constant jump coefficients of the two-state costate field:
/// `(q_ab, q_ba) = (h(a) - h(b), h(b) - h(a))`.
pub fn ex1_adjoint_closed_form(spec: &TwoStateSpec) -> (f64, f64) {
    (spec.h_a - spec.h_b, spec.h_b - spec.h_a)
}

/// Quadratic control penalty with the spec's terminal cost.
pub fn ex1_cost_spec(spec: &TwoStateSpec) -> CostSpec {
    let s = *spec;
    CostSpec {
        running: Box::new(|_t, _x, _mf, u| 0.5 * u * u),
        terminal: Box::new(move |x, _mh| s.h(x)),
        kappa: Box::new(|s| s as f64),
        kappa_f: Box::new(|s| s as f64),
        kappa_h: Box::new(|s| s as f64),
    }
}

/// Backward data for the mean-free two-state problem: terminal field
/// `-h` transported unchanged (the dt-terms are absorbed by the measure
/// under which the costate is a martingale), so the jump coefficients
/// stay at their terminal values.
pub fn ex1_driver(spec: &TwoStateSpec) -> DriverSpec {
    let s = *spec;
    DriverSpec::new(
        |_t, _i, _q, _m| 0.0,
        move |i, _m| if i == 0 { -s.h_a } else { -s.h_b },
    )
}

/// Coefficients of the mean ODE `mu' = quadratic mu^2 + linear mu +
/// constant` for the mean-field two-state problem, with the
/// admissibility band `[lower_level, exit_level]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiParams {
    pub quadratic: f64,
    pub linear: f64,
    pub constant: f64,
    pub m0: f64,
    pub exit_level: f64,
    pub lower_level: f64,
}

impl RiccatiParams {
    pub fn with_m0(mut self, m0: f64) -> Self {
        self.m0 = m0;
        self
    }

    /// Right-hand side of the mean ODE.
    pub fn slope(&self, mu: f64) -> f64 {
        (self.quadratic * mu + self.linear) * mu + self.constant
    }
}

/// Build the mean-ODE coefficients from `(a, b, alpha)`:
/// `quadratic = 2(b-a) - 1`, `linear = 3a^2 + a(1-2b) - b^2`,
/// `constant = alpha b + a(b^2 - a^2)`.
pub fn ex2_riccati_coeffs(a: State, b: State, alpha: f64) -> RiccatiParams {
    let (af, bf) = (a as f64, b as f64);
    RiccatiParams {
        quadratic: 2.0 * (bf - af) - 1.0,
        linear: 3.0 * af * af + af * (1.0 - 2.0 * bf) - bf * bf,
        constant: alpha * bf + af * (bf * bf - af * af),
        m0: 0.0,
        exit_level: 0.5 * (af + bf),
        lower_level: 0.0,
    }
}

/// RK4 integration of the constrained mean ODE, watching the band
/// `[lower_level, exit_level]`. The first crossing is refined to 1e-6 by
/// bisection on cubic-Hermite dense output; `None` means no crossing
/// before `t_max`. The returned curve covers `[0, exit]` (or
/// `[0, t_max]`), resampled to at most 4096 uniform cells.
pub fn solve_constrained_riccati(
    params: &RiccatiParams,
    dt: f64,
    t_max: f64,
) -> Result<(MeanCurve, Option<f64>)> {
    if !(dt > 0.0) || !(t_max >= 0.0) {
        return Err(Error::InvalidInput("need dt > 0 and t_max >= 0".into()));
    }
    let inside = |mu: f64| mu >= params.lower_level && mu <= params.exit_level;
    if !inside(params.m0) {
        let curve = MeanCurve::uniform(dt, vec![params.m0, params.m0], "identity")?;
        return Ok((curve, Some(0.0)));
    }

    let n_steps = (t_max / dt).ceil() as usize;
    let mut values = Vec::with_capacity(n_steps + 1);
    values.push(params.m0);
    let mut mu = params.m0;
    let mut exit = None;

    'steps: for k in 0..n_steps {
        let t0 = k as f64 * dt;
        let k1 = params.slope(mu);
        let k2 = params.slope(mu + 0.5 * dt * k1);
        let k3 = params.slope(mu + 0.5 * dt * k2);
        let k4 = params.slope(mu + dt * k3);
        let next = mu + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !next.is_finite() || next.abs() > 1e8 {
            return Err(Error::NonFiniteState { last_valid_t: t0 });
        }
        if !inside(next) {
            // Cubic Hermite dense output on [t0, t0 + dt].
            let d0 = params.slope(mu);
            let d1 = params.slope(next);
            let dense = |s: f64| {
                let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
                let h10 = s * (1.0 - s) * (1.0 - s);
                let h01 = s * s * (3.0 - 2.0 * s);
                let h11 = s * s * (s - 1.0);
                h00 * mu + h10 * dt * d0 + h01 * next + h11 * dt * d1
            };
            let violation = |m: f64| (params.lower_level - m).max(m - params.exit_level);
            let mut lo = 0.0;
            let mut hi = 1.0;
            while (hi - lo) * dt > 1e-6 {
                let mid = 0.5 * (lo + hi);
                if violation(dense(mid)) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            exit = Some(t0 + 0.5 * (lo + hi) * dt);
            break 'steps;
        }
        mu = next;
        values.push(mu);
    }

    let t_end = (values.len() - 1) as f64 * dt;
    let curve = if values.len() < 2 {
        MeanCurve::uniform(dt, vec![params.m0, params.m0], "identity")?
    } else if values.len() > 4097 {
        // Resample to 4096 uniform cells by linear interpolation.
        let out_cells = 4096;
        let fine = values;
        let resampled: Vec<f64> = (0..=out_cells)
            .map(|j| {
                let t = t_end * j as f64 / out_cells as f64;
                let pos = t / dt;
                let k = (pos.floor() as usize).min(fine.len() - 2);
                let w = pos - k as f64;
                fine[k] * (1.0 - w) + fine[k + 1] * w
            })
            .collect();
        MeanCurve::uniform(t_end, resampled, "identity")?
    } else {
        MeanCurve::uniform(t_end, values, "identity")?
    };
    Ok((curve, exit))
}

/// Analytic time until the mean ODE leaves the band, via the
/// antiderivative of `1 / (quadratic mu^2 + linear mu + constant)`.
/// Returns `None` when the flow is confined by a root between the start
/// and the boundary it moves toward.
pub fn riccati_exit_time_closed_form(params: &RiccatiParams) -> Result<Option<f64>> {
    let (qa, qb, qc) = (params.quadratic, params.linear, params.constant);
    if qa == 0.0 {
        return Err(Error::ZeroQuadraticCoefficient);
    }
    if params.m0 < params.lower_level || params.m0 > params.exit_level {
        return Ok(Some(0.0));
    }
    let slope0 = params.slope(params.m0);
    if slope0 == 0.0 {
        return Ok(None);
    }
    let target = if slope0 > 0.0 {
        params.exit_level
    } else {
        params.lower_level
    };

    let disc = qb * qb - 4.0 * qa * qc;
    let scale = (qb * qb).max((4.0 * qa * qc).abs()).max(1.0);

    // A real root strictly between m0 and the target (or at the target)
    // confines the flow: it converges to the root and never crosses.
    if disc >= 0.0 {
        let sq = disc.max(0.0).sqrt();
        for root in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
            let between = if slope0 > 0.0 {
                root > params.m0 && root <= target
            } else {
                root < params.m0 && root >= target
            };
            if between {
                return Ok(None);
            }
        }
    }

    let antiderivative: Box<dyn Fn(f64) -> f64> = if disc < -1e-12 * scale {
        let s = (-disc).sqrt();
        Box::new(move |mu: f64| 2.0 / s * ((2.0 * qa * mu + qb) / s).atan())
    } else if disc.abs() <= 1e-12 * scale {
        Box::new(move |mu: f64| -2.0 / (2.0 * qa * mu + qb))
    } else {
        let s = disc.sqrt();
        let r1 = (-qb - s) / (2.0 * qa);
        let r2 = (-qb + s) / (2.0 * qa);
        Box::new(move |mu: f64| ((mu - r2) / (mu - r1)).abs().ln() / (qa * (r2 - r1)))
    };
    Ok(Some(antiderivative(target) - antiderivative(params.m0)))
}

/// Optimal feedback for the mean-field two-state problem:
/// `u(t) = ((b^2 - a^2) + 2 mu(t-)(a - b)) I_b(t-)`.
pub fn ex2_optimal_control(spec: &TwoStateSpec, mu: MeanCurve) -> impl ControlSignal {
    let (a, b) = (spec.a as f64, spec.b as f64);
    let b_state = spec.b;
    FeedbackControl::piecewise(move |t, x| {
        if x == b_state {
            (b * b - a * a) + 2.0 * mu.value_before(t) * (a - b)
        } else {
            0.0
        }
    })
}

/// Quadratic penalty plus terminal variance `(x(T) - m_h)^2` with
/// identity mean functionals.
pub fn ex2_cost_spec(_spec: &TwoStateSpec) -> CostSpec {
    CostSpec {
        running: Box::new(|_t, _x, _mf, u| 0.5 * u * u),
        terminal: Box::new(|x, mh| {
            let d = x as f64 - mh;
            d * d
        }),
        kappa: Box::new(|s| s as f64),
        kappa_f: Box::new(|s| s as f64),
        kappa_h: Box::new(|s| s as f64),
    }
}

/// Backward data for the mean-field two-state problem: the costate field
/// is the terminal variance field evaluated at the running mean,
/// `phi(t, i) = -(i - mu(t))^2`, so the transport term is
/// `-d/dt phi = -2 (i - mu) mu'`. The supplied `dynamics` must be the
/// evolution law of the supplied curve, so that `mu'` is its actual
/// derivative.
pub fn ex2_driver(spec: &TwoStateSpec, dynamics: RiccatiParams, mu: MeanCurve) -> DriverSpec {
    let (a, b) = (spec.a as f64, spec.b as f64);
    DriverSpec::new(
        move |_t, i, _q, mean| {
            let m = mean.expect("ex2 driver needs its mean curve");
            let state = if i == 0 { a } else { b };
            -2.0 * (state - m) * dynamics.slope(m)
        },
        move |i, mean| {
            let m = mean.expect("ex2 terminal needs its mean curve");
            let state = if i == 0 { a } else { b };
            -(state - m) * (state - m)
        },
    )
    .with_mean(mu)
}

/// Birth-death chain with banded base rates and a controlled,
/// mean-coupled death band `u + beta * mean` (floored at zero).
#[derive(Debug, Clone)]
pub struct SchloglSpec {
    /// Banded base rates: `base_rates[i][j]` applies to every jump
    /// except the death band `j = i - 1`.
    pub base_rates: Vec<Vec<f64>>,
    pub beta: f64,
    pub n_max: State,
    /// Band half-width: base rates vanish for `|j - i| >= band`.
    pub band: usize,
    /// Reference death rate, which must be positive so the controlled
    /// death band stays absolutely continuous.
    pub death_ref: f64,
}

impl SchloglSpec {
    /// Minimal banded instance: constant birth rate to `i + 1`
    /// (truncated at `n_max`), controlled death band, band width 2.
    pub fn banded(n_max: State, birth_rate: f64, beta: f64) -> Result<Self> {
        if !(birth_rate >= 0.0) || !(beta >= 0.0) {
            return Err(Error::InvalidInput("rates must be nonnegative".into()));
        }
        let n = n_max + 1;
        let mut base = vec![vec![0.0; n]; n];
        for (i, row) in base.iter_mut().enumerate().take(n) {
            if i + 1 < n {
                row[i + 1] = birth_rate;
            }
        }
        Ok(SchloglSpec {
            base_rates: base,
            beta,
            n_max,
            band: 2,
            death_ref: 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_max + 1;
        if self.base_rates.len() != n || self.base_rates.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput(
                "base rate matrix must be (n_max+1)^2".into(),
            ));
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.base_rates[i][j];
                if v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "negative base rate at ({i},{j})"
                    )));
                }
                if v > 0.0 && i.abs_diff(j) >= self.band {
                    return Err(Error::InvalidInput(format!(
                        "base rate at ({i},{j}) outside band {}",
                        self.band
                    )));
                }
            }
        }
        if !(self.beta >= 0.0) || !(self.death_ref > 0.0) {
            return Err(Error::InvalidInput(
                "need beta >= 0 and death_ref > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn states(&self) -> Vec<State> {
        (0..=self.n_max).collect()
    }

    /// Reference generator: base rates off the death band, `death_ref`
    /// on it.
    pub fn reference_generator(&self) -> Result<GeneratorMatrix> {
        self.validate()?;
        let n = self.n_max + 1;
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                if i == j {
                    continue;
                }
                *slot = if j + 1 == i {
                    self.death_ref
                } else {
                    self.base_rates[i][j]
                };
            }
            let off: f64 = row.iter().sum();
            row[i] = -off;
        }
        validate_generator(&rows, &self.states())
    }
}

/// Controlled Schlogl-type intensity. Off the death band the base rates
/// apply unchanged; on it the rate is `max(u + beta * mean, 0)`, with a
/// counter recording when the floor binds. Evaluations at the truncation
/// boundary are counted when the banded pattern would have sent rate
/// above `n_max`.
pub struct SchloglIntensity {
    spec: SchloglSpec,
    support: Vec<State>,
    u_max: f64,
    mean_max: f64,
    floor_clips: AtomicU64,
    truncation_clips: AtomicU64,
    boundary_truncates: bool,
}

pub fn ex3_intensity(spec: &SchloglSpec, u_max: f64, mean_max: f64) -> Result<SchloglIntensity> {
    spec.validate()?;
    // If any state sends rate upward, the boundary state would too but
    // for the truncation; its evaluations are then worth counting.
    let boundary_truncates = spec
        .base_rates
        .iter()
        .enumerate()
        .any(|(i, row)| row.iter().enumerate().any(|(j, &v)| v > 0.0 && j > i));
    Ok(SchloglIntensity {
        support: spec.states(),
        spec: spec.clone(),
        u_max,
        mean_max,
        floor_clips: AtomicU64::new(0),
        truncation_clips: AtomicU64::new(0),
        boundary_truncates,
    })
}

impl SchloglIntensity {
    pub fn floor_clips(&self) -> u64 {
        self.floor_clips.load(Ordering::Relaxed)
    }

    /// Evaluations at the truncation boundary where outgoing birth rate
    /// was dropped.
    pub fn truncation_clips(&self) -> u64 {
        self.truncation_clips.load(Ordering::Relaxed)
    }
}

impl Intensity for SchloglIntensity {
    fn support(&self) -> &[State] {
        &self.support
    }

    fn rates_into(&self, t: f64, prefix: &Prefix, mean: f64, u: f64, out: &mut [f64]) {
        out.fill(0.0);
        let i = prefix.state_before(t);
        for (j, slot) in out.iter_mut().enumerate() {
            if j == i {
                continue;
            }
            if j + 1 == i {
                let rate = u + self.spec.beta * mean;
                if rate < 0.0 {
                    self.floor_clips.fetch_add(1, Ordering::Relaxed);
                } else {
                    *slot = rate;
                }
            } else {
                *slot = self.spec.base_rates[i][j];
            }
        }
        if i == self.spec.n_max && self.boundary_truncates {
            self.truncation_clips.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn rate_bound(&self) -> f64 {
        let base_max = self
            .spec
            .base_rates
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(|&(j, _)| j + 1 != i && j != i)
                    .map(|(_, &v)| v)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        base_max + (self.u_max + self.spec.beta * self.mean_max).max(0.0)
    }

    fn piecewise_constant(&self) -> bool {
        true
    }
}

/// Optimal feedback for the Schlogl problem: `u(t) = 1 - I_0(t-)`.
pub fn ex3_schlogl_control() -> impl ControlSignal {
    FeedbackControl::stationary(|_t, x| if x == 0 { 0.0 } else { 1.0 })
}

/// Quadratic penalty plus terminal cost `x(T)`.
pub fn ex3_cost_spec() -> CostSpec {
    CostSpec {
        running: Box::new(|_t, _x, _mf, u| 0.5 * u * u),
        terminal: Box::new(|x, _mh| x as f64),
        kappa: Box::new(|s| s as f64),
        kappa_f: Box::new(|s| s as f64),
        kappa_h: Box::new(|s| s as f64),
    }
}

/// Backward data for the Schlogl problem: terminal field `-x` transported
/// unchanged, giving unit jump coefficients down the death band.
pub fn ex3_driver(spec: &SchloglSpec) -> DriverSpec {
    let states = spec.states();
    DriverSpec::new(move |_t, _i, _q, _m| 0.0, move |i, _m| -(states[i] as f64))
}

/// One row of an exit-time table.
#[derive(Debug, Clone, Copy)]
pub struct ExitTimeRow {
    pub a: State,
    pub b: State,
    pub alpha: f64,
    pub m0: f64,
    pub exit_time: Option<f64>,
}

/// Exit times for the cartesian product of the requested parameters,
/// computed by the constrained integrator. Deterministic row order.
pub fn exit_time_table(
    pairs: &[(State, State)],
    alphas: &[f64],
    m0s: &[f64],
    dt: f64,
    t_max: f64,
) -> Result<Vec<ExitTimeRow>> {
    let cases: Vec<(State, State, f64, f64)> = pairs
        .iter()
        .flat_map(|&(a, b)| {
            alphas
                .iter()
                .flat_map(move |&alpha| m0s.iter().map(move |&m0| (a, b, alpha, m0)))
        })
        .collect();
    cases
        .par_iter()
        .map(|&(a, b, alpha, m0)| {
            let params = ex2_riccati_coeffs(a, b, alpha).with_m0(m0);
            let (_, exit) = solve_constrained_riccati(&params, dt, t_max)?;
            Ok(ExitTimeRow {
                a,
                b,
                alpha,
                m0,
                exit_time: exit,
            })
        })
        .collect()
}

/// CSV serialization: header `a,b,alpha,m0,exit_time` with `inf` for
/// confined rows.
pub fn write_exit_time_csv<W: Write>(rows: &[ExitTimeRow], w: &mut W) -> Result<()> {
    writeln!(w, "a,b,alpha,m0,exit_time")?;
    for r in rows {
        let exit = r.exit_time.map_or("inf".to_string(), fmt_f64);
        writeln!(
            w,
            "{},{},{},{},{}",
            r.a,
            r.b,
            fmt_f64(r.alpha),
            fmt_f64(r.m0),
            exit
        )?;
    }
    Ok(())
}

/// The probe battery shared by the model problems: nonnegative bumps of
/// several shapes plus scalings of the base control toward zero.
pub fn probe_directions(
    base: impl Fn(f64, State) -> f64 + Sync + Send + Clone + 'static,
    horizon: f64,
    states: (State, State),
) -> Vec<(String, Box<dyn ControlSignal>)> {
    let (lo_state, hi_state) = states;
    let b1 = base.clone();
    let b2 = base.clone();
    vec![
        (
            "const+0.10".into(),
            Box::new(ConstantDirection(0.1)) as Box<dyn ControlSignal>,
        ),
        ("const+0.25".into(), Box::new(ConstantDirection(0.25))),
        (
            format!("state{lo_state}+0.10"),
            Box::new(FeedbackControl::stationary(move |_t, x| {
                if x == lo_state {
                    0.1
                } else {
                    0.0
                }
            })),
        ),
        (
            format!("state{hi_state}+0.10"),
            Box::new(FeedbackControl::stationary(move |_t, x| {
                if x == hi_state {
                    0.1
                } else {
                    0.0
                }
            })),
        ),
        (
            "early+0.10".into(),
            Box::new(FeedbackControl::piecewise(move |t, _x| {
                if t <= 0.5 * horizon {
                    0.1
                } else {
                    0.0
                }
            })),
        ),
        (
            "late+0.10".into(),
            Box::new(FeedbackControl::piecewise(move |t, _x| {
                if t > 0.5 * horizon {
                    0.1
                } else {
                    0.0
                }
            })),
        ),
        (
            "scale x0.1".into(),
            Box::new(FeedbackControl::stationary(move |t, x| -0.9 * b1(t, x))),
        ),
        (
            "to zero".into(),
            Box::new(FeedbackControl::stationary(move |t, x| -b2(t, x))),
        ),
    ]
}

/// Constant perturbation direction.
struct ConstantDirection(f64);

impl ControlSignal for ConstantDirection {
    fn value(&self, _t: f64, _prefix: &Prefix) -> f64 {
        self.0
    }

    fn piecewise_constant(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::solve_adjoint_ode;
    use crate::chain::JumpPath;

    fn spec01() -> TwoStateSpec {
        TwoStateSpec::new(0, 1, 0.5, 1.0, 1.0, 1.0, 3.0).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(TwoStateSpec::new(1, 1, 0.5, 1.0, 1.0, 0.0, 1.0).is_err());
        assert!(TwoStateSpec::new(0, 1, 0.0, 1.0, 1.0, 0.0, 1.0).is_err());
        assert!(TwoStateSpec::new(0, 1, 0.5, 1.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn ex1_control_values() {
        let spec = spec01();
        let ctrl = ex1_optimal_control(&spec);
        let at_a = JumpPath::new(0, vec![], 1.0).unwrap();
        let at_b = JumpPath::new(1, vec![], 1.0).unwrap();
        assert_eq!(ctrl.value(0.5, &Prefix::of(&at_a)), 0.0);
        assert_eq!(ctrl.value(0.5, &Prefix::of(&at_b)), 2.0);

        let flat = TwoStateSpec::new(0, 1, 0.5, 1.0, 1.0, 2.0, 2.0).unwrap();
        let ctrl = ex1_optimal_control(&flat);
        assert_eq!(ctrl.value(0.5, &Prefix::of(&at_a)), 0.0);
        assert_eq!(ctrl.value(0.5, &Prefix::of(&at_b)), 0.0);
    }

    #[test]
    fn ex1_closed_form_constants() {
        assert_eq!(ex1_adjoint_closed_form(&spec01()), (-2.0, 2.0));
        let flat = TwoStateSpec::new(0, 1, 0.5, 1.0, 1.0, 2.0, 2.0).unwrap();
        assert_eq!(ex1_adjoint_closed_form(&flat), (0.0, 0.0));
    }

    #[test]
    fn ex1_field_matches_closed_form() {
        let spec = spec01();
        let gen = spec.generator();
        let grid: Vec<f64> = (0..=256).map(|k| k as f64 / 256.0).collect();
        let field = solve_adjoint_ode(&ex1_driver(&spec), &gen, &grid).unwrap();
        let (q_ab, q_ba) = ex1_adjoint_closed_form(&spec);
        for k in 0..grid.len() {
            assert!((field.q(k, 0, 1) - q_ab).abs() <= 1e-8);
            assert!((field.q(k, 1, 0) - q_ba).abs() <= 1e-8);
        }
    }

    #[test]
    fn riccati_coefficients() {
        let p = ex2_riccati_coeffs(0, 1, 0.3);
        assert_eq!((p.quadratic, p.linear, p.constant), (1.0, -1.0, 0.3));
        let p = ex2_riccati_coeffs(1, 2, 0.5);
        assert_eq!((p.quadratic, p.linear, p.constant), (1.0, -4.0, 4.0));
        let p = ex2_riccati_coeffs(0, 2, 0.7);
        assert_eq!((p.quadratic, p.linear, p.constant), (3.0, -4.0, 1.4));
        assert_eq!(p.exit_level, 1.0);
    }

    #[test]
    fn closed_form_arctan_branch() {
        // (0,1,0.5,0): 2 * atan at the half level = pi/2.
        let p = ex2_riccati_coeffs(0, 1, 0.5).with_m0(0.0);
        let t = riccati_exit_time_closed_form(&p).unwrap().unwrap();
        assert!((t - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn closed_form_double_root_branch() {
        // (1,2,0.5,1): double root at 2, integral from 1 to 1.5 is 1.
        let p = ex2_riccati_coeffs(1, 2, 0.5).with_m0(1.0);
        let t = riccati_exit_time_closed_form(&p).unwrap().unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_log_branch() {
        // (2,3,0.5,2): distinct real roots outside the band. Reference
        // value from composite Simpson on 1/(mu^2 - 7 mu + 11.5) over
        // [2, 2.5] at 4e6 intervals.
        let p = ex2_riccati_coeffs(2, 3, 0.5).with_m0(2.0);
        let t = riccati_exit_time_closed_form(&p).unwrap().unwrap();
        assert!((t - 0.760_345_996_3).abs() < 1e-9, "got {t}");
    }

    #[test]
    fn closed_form_confined_flow() {
        // (0,1,0.2): a stable root below the exit level confines the flow.
        let p = ex2_riccati_coeffs(0, 1, 0.2).with_m0(0.0);
        assert_eq!(riccati_exit_time_closed_form(&p).unwrap(), None);
    }

    #[test]
    fn closed_form_rejects_degenerate_quadratic() {
        let p = RiccatiParams {
            quadratic: 0.0,
            linear: 1.0,
            constant: 0.0,
            m0: 0.1,
            exit_level: 0.5,
            lower_level: 0.0,
        };
        assert!(matches!(
            riccati_exit_time_closed_form(&p),
            Err(Error::ZeroQuadraticCoefficient)
        ));
    }

    #[test]
    fn numeric_exit_matches_closed_form() {
        for (a, b, alpha, m0) in [
            (0, 1, 0.3, 0.0),
            (0, 1, 0.5, 0.25),
            (1, 2, 0.5, 1.0),
            (2, 3, 0.7, 2.0),
            (0, 2, 0.7, 0.0),
        ] {
            let p = ex2_riccati_coeffs(a, b, alpha).with_m0(m0);
            let exact = riccati_exit_time_closed_form(&p).unwrap().unwrap();
            let (_, numeric) = solve_constrained_riccati(&p, 1e-4, 100.0).unwrap();
            let numeric = numeric.unwrap();
            assert!(
                (numeric - exact).abs() < 1e-5,
                "({a},{b},{alpha},{m0}): numeric {numeric} vs exact {exact}"
            );
        }
    }

    #[test]
    fn numeric_confinement_matches_closed_form() {
        let p = ex2_riccati_coeffs(0, 1, 0.2).with_m0(0.0);
        let (_, exit) = solve_constrained_riccati(&p, 1e-3, 100.0).unwrap();
        assert_eq!(exit, None);
    }

    #[test]
    fn flagged_case_oracle_value() {
        // Closed form at (0,1,0.6,0) for comparison against suspect
        // published figures: about 1.186.
        let p = ex2_riccati_coeffs(0, 1, 0.6).with_m0(0.0);
        let t = riccati_exit_time_closed_form(&p).unwrap().unwrap();
        assert!((t - 1.186).abs() < 1e-3, "oracle value {t}");
        let (_, numeric) = solve_constrained_riccati(&p, 1e-4, 100.0).unwrap();
        assert!((numeric.unwrap() - t).abs() < 1e-5);
    }

    #[test]
    fn exit_times_decrease_in_alpha() {
        let mut prev = f64::INFINITY;
        for alpha in [0.3, 0.4, 0.5, 0.7, 1.0, 5.0] {
            let p = ex2_riccati_coeffs(0, 1, alpha).with_m0(0.0);
            let t = riccati_exit_time_closed_form(&p).unwrap().unwrap();
            assert!(t < prev, "exit time not decreasing at alpha={alpha}");
            prev = t;
        }
    }

    #[test]
    fn ex2_control_values() {
        let spec = TwoStateSpec::new(0, 1, 0.3, 1.0, 1.0, 0.0, 0.0).unwrap();
        let mu = MeanCurve::constant(1.0, 3, 0.25, "identity");
        let ctrl = ex2_optimal_control(&spec, mu);
        let at_a = JumpPath::new(0, vec![], 1.0).unwrap();
        let at_b = JumpPath::new(1, vec![], 1.0).unwrap();
        assert_eq!(ctrl.value(0.5, &Prefix::of(&at_a)), 0.0);
        assert!((ctrl.value(0.5, &Prefix::of(&at_b)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ex2_control_admissible_at_band_boundary() {
        // At mu = (a+b)/2 the b-state control collapses to
        // (b^2-a^2) + (a+b)(a-b) = 0, so the controlled rate u + mu
        // equals (a+b)/2 >= 0 and stays admissible.
        for (a, b) in [(0usize, 1usize), (1, 2), (0, 3)] {
            let spec = TwoStateSpec::new(a, b, 0.5, 1.0, 1.0, 0.0, 0.0).unwrap();
            let mid = 0.5 * (a + b) as f64;
            let mu = MeanCurve::constant(1.0, 3, mid, "identity");
            let ctrl = ex2_optimal_control(&spec, mu);
            let at_b = JumpPath::new(b, vec![], 1.0).unwrap();
            let u = ctrl.value(0.5, &Prefix::of(&at_b));
            assert!(u.abs() < 1e-12);
            assert!(u + mid >= 0.0);
        }
    }

    #[test]
    fn ex2_field_matches_variance_identification() {
        let spec = TwoStateSpec::new(0, 1, 0.3, 1.0, 1.0, 0.0, 0.0).unwrap();
        let params = ex2_riccati_coeffs(0, 1, 0.3).with_m0(0.0);
        let (mu, exit) = solve_constrained_riccati(&params, 1e-4, 1.0).unwrap();
        assert_eq!(exit, None);
        let gen = spec.generator();
        let grid: Vec<f64> = (0..=256).map(|k| k as f64 / 256.0).collect();
        let field = solve_adjoint_ode(&ex2_driver(&spec, params, mu.clone()), &gen, &grid).unwrap();
        let mut max_dev = 0.0f64;
        for (k, &t) in grid.iter().enumerate() {
            let expected = 1.0 - 2.0 * mu.interpolate(t);
            max_dev = max_dev.max((field.q(k, 1, 0) - expected).abs());
        }
        assert!(max_dev <= 1e-4, "sup deviation {max_dev}");
    }

    #[test]
    fn schlogl_control_and_rates() {
        let ctrl = ex3_schlogl_control();
        let at_0 = JumpPath::new(0, vec![], 1.0).unwrap();
        let at_7 = JumpPath::new(7, vec![], 1.0).unwrap();
        assert_eq!(ctrl.value(0.5, &Prefix::of(&at_0)), 0.0);
        assert_eq!(ctrl.value(0.5, &Prefix::of(&at_7)), 1.0);

        // beta = 0, u = 0: the death band is zero everywhere.
        let spec = SchloglSpec::banded(5, 1.0, 0.0).unwrap();
        let intensity = ex3_intensity(&spec, 1.0, 5.0).unwrap();
        let mut row = vec![0.0; 6];
        let path = JumpPath::new(3, vec![], 1.0).unwrap();
        intensity.rates_into(0.5, &Prefix::of(&path), 0.0, 0.0, &mut row);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[4], 1.0);
    }

    #[test]
    fn schlogl_floor_flag_binds() {
        let spec = SchloglSpec::banded(5, 1.0, 0.5).unwrap();
        let intensity = ex3_intensity(&spec, 1.0, 5.0).unwrap();
        let mut row = vec![0.0; 6];
        let path = JumpPath::new(3, vec![], 1.0).unwrap();
        // u = -2, beta*mean = 0.5 -> rate would be negative.
        intensity.rates_into(0.5, &Prefix::of(&path), 1.0, -2.0, &mut row);
        assert_eq!(row[2], 0.0);
        assert_eq!(intensity.floor_clips(), 1);
    }

    #[test]
    fn schlogl_truncation_counter_records_boundary_evaluations() {
        let spec = SchloglSpec::banded(5, 1.0, 0.0).unwrap();
        let intensity = ex3_intensity(&spec, 1.0, 5.0).unwrap();
        let mut row = vec![0.0; 6];
        let interior = JumpPath::new(3, vec![], 1.0).unwrap();
        intensity.rates_into(0.5, &Prefix::of(&interior), 0.0, 0.0, &mut row);
        assert_eq!(intensity.truncation_clips(), 0);
        let boundary = JumpPath::new(5, vec![], 1.0).unwrap();
        intensity.rates_into(0.5, &Prefix::of(&boundary), 0.0, 0.0, &mut row);
        assert_eq!(intensity.truncation_clips(), 1);
        assert!(row.iter().all(|&r| r == 0.0 || r.is_finite()));
    }

    #[test]
    fn schlogl_field_has_unit_death_band_coefficients() {
        let spec = SchloglSpec::banded(20, 1.0, 0.1).unwrap();
        let gen = spec.reference_generator().unwrap();
        let grid: Vec<f64> = (0..=128).map(|k| k as f64 / 128.0).collect();
        let field = solve_adjoint_ode(&ex3_driver(&spec), &gen, &grid).unwrap();
        for k in 0..grid.len() {
            for i in 1..=20 {
                assert!((field.q(k, i, i - 1) - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn table_rows_follow_request_order() {
        let rows = exit_time_table(&[(0, 1)], &[0.3, 0.5], &[0.0], 1e-3, 10.0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].alpha, 0.3);
        assert!(rows[0].exit_time.unwrap() > rows[1].exit_time.unwrap());
        let mut buf = Vec::new();
        write_exit_time_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a,b,alpha,m0,exit_time\n"));
    }

    #[test]
    fn empty_table_is_header_only() {
        let rows = exit_time_table(&[], &[0.5], &[0.0], 1e-3, 1.0).unwrap();
        assert!(rows.is_empty());
        let mut buf = Vec::new();
        write_exit_time_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b,alpha,m0,exit_time\n");
    }

    #[test]
    fn riccati_blow_up_is_reported() {
        let p = RiccatiParams {
            quadratic: 5.0,
            linear: 0.0,
            constant: 1.0,
            m0: 1.0,
            exit_level: 1e9,
            lower_level: -1e9,
        };
        assert!(matches!(
            solve_constrained_riccati(&p, 1e-3, 10.0),
            Err(Error::NonFiniteState { .. })
        ));
    }
}
