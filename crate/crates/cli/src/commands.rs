//! Subcommand implementations. Every command writes its artifacts plus a
//! `manifest.json` with SHA-256 digests into the output directory.

use crate::config::{CustomParams, Ex1Params, Ex2Params, Numerics, Problem, RunConfig};
use crate::manifest::Manifest;
use mfchain::adjoint::{
    check_stationarity, maximize_hamiltonian, solve_adjoint_ode, AdjointField, Hamiltonian,
};
use mfchain::chain::{
    dynkin_residual, optional_variation, path_statistics, simulate_batch, validate_generator,
    ConstantControl, ControlSignal, GeneratorIntensity, GeneratorMatrix, InitialLaw, Intensity,
    JumpPath, Prefix, State, TabulatedControl,
};
use mfchain::cost::{estimate_cost_direct, estimate_cost_reweighted, CostEstimate, CostSpec};
use mfchain::error::{Error, Result};
use mfchain::examples::*;
use mfchain::girsanov::martingale_checks;
use mfchain::meanfield::{solve_mean_fixed_point, FixedPointConfig, MeanCurve};
use serde_json::json;
use std::path::Path;

/// One assembled problem: everything the generic commands need.
struct Assembled {
    gen: GeneratorMatrix,
    intensity: Box<dyn Intensity>,
    control: Box<dyn ControlSignal>,
    cost: Option<CostSpec>,
    mean: Option<MeanCurve>,
    initial: InitialLaw,
    /// Admissible control interval for maximization.
    control_set: (f64, f64),
    /// Stationarity budget (grid-interpolation error for the mean-field
    /// two-state problem, machine-level otherwise).
    stationarity_tol: f64,
}

fn grid_nodes(numerics: &Numerics) -> Vec<f64> {
    (0..=numerics.grid_cells)
        .map(|k| numerics.horizon * k as f64 / numerics.grid_cells as f64)
        .collect()
}

fn ex1_spec_from(p: &Ex1Params) -> Result<TwoStateSpec> {
    TwoStateSpec::new(p.a, p.b, p.alpha, p.g_ab, p.g_ba, p.h_a, p.h_b)
}

fn ex2_spec_from(p: &Ex2Params) -> Result<TwoStateSpec> {
    TwoStateSpec::new(p.a, p.b, p.alpha, p.g_ab, p.g_ba, 0.0, 0.0)
}

/// Mean curve plugged into the mean-field two-state problem: the
/// self-consistent mean ODE (linear coefficient shifted by -alpha, the
/// fixed point of the plugged dynamics) resampled onto the command grid.
/// Self-consistency makes the two cost estimators read the same mean
/// arguments; `solve` reports the delta against the tabulated-coefficient
/// curve separately. The constraint must not exit before the horizon.
fn ex2_consistent_dynamics(p: &Ex2Params) -> RiccatiParams {
    let tabulated = ex2_riccati_coeffs(p.a, p.b, p.alpha).with_m0(p.m0);
    RiccatiParams {
        linear: tabulated.linear - p.alpha,
        ..tabulated
    }
}

fn ex2_mean_on_grid(p: &Ex2Params, numerics: &Numerics) -> Result<MeanCurve> {
    let params = ex2_consistent_dynamics(p);
    let (fine, exit) = solve_constrained_riccati(&params, numerics.dt, numerics.horizon)?;
    if let Some(t) = exit {
        return Err(Error::InvalidInput(format!(
            "mean constraint exits at t={t:.4}, before the horizon {}",
            numerics.horizon
        )));
    }
    MeanCurve::uniform(
        numerics.horizon,
        grid_nodes(numerics)
            .iter()
            .map(|&t| fine.interpolate(t))
            .collect(),
        "identity",
    )
}

/// Self-consistent mean for the birth-death problem at its closed-form
/// control, from the damped fixed point.
fn schlogl_mean_on_grid(spec: &SchloglSpec, x0: State, numerics: &Numerics) -> Result<MeanCurve> {
    let gen = spec.reference_generator()?;
    let intensity = ex3_intensity(spec, 2.0, spec.n_max as f64)?;
    let control = ex3_schlogl_control();
    let cfg = FixedPointConfig {
        max_iters: 30,
        damping: numerics.damping,
        tol: numerics.tol,
        n_paths: numerics.n_paths.min(20_000),
    };
    let sol = solve_mean_fixed_point(
        &intensity,
        &gen,
        &control,
        &|s| s as f64,
        "identity",
        &InitialLaw::Point(x0),
        numerics.horizon,
        numerics.grid_cells,
        &cfg,
        numerics.seed,
    )?;
    Ok(sol.curve)
}

fn assemble(config: &RunConfig) -> Result<Assembled> {
    let numerics = &config.numerics;
    match config.problem()? {
        Problem::Ex1(p) => {
            let spec = ex1_spec_from(&p)?;
            let u_max = 2.0 * (p.h_b - p.h_a) + config.control_offset.abs() + 1.0;
            let base = ex1_optimal_control(&spec);
            Ok(Assembled {
                gen: spec.generator(),
                intensity: Box::new(ex1_intensity(&spec, u_max)),
                control: offset_control(base, config.control_offset),
                cost: Some(ex1_cost_spec(&spec)),
                mean: None,
                initial: InitialLaw::Point(p.x0.unwrap_or(p.a)),
                control_set: (0.0, u_max),
                stationarity_tol: 1e-6,
            })
        }
        Problem::Ex2(p) => {
            let spec = ex2_spec_from(&p)?;
            let mu = ex2_mean_on_grid(&p, numerics)?;
            let gap = (p.b * p.b - p.a * p.a) as f64;
            let u_max = 1.5 * gap + config.control_offset.abs() + 1.0;
            let base = ex2_optimal_control(&spec, mu.clone());
            Ok(Assembled {
                gen: spec.generator(),
                intensity: Box::new(ex2_intensity(&spec, u_max, 0.5 * (p.a + p.b) as f64)),
                control: offset_control(base, config.control_offset),
                cost: Some(ex2_cost_spec(&spec)),
                mean: Some(mu),
                initial: spec.initial_law(p.m0)?,
                control_set: (0.0, u_max),
                stationarity_tol: 1e-4,
            })
        }
        Problem::Schlogl(p) => {
            let spec = SchloglSpec::banded(p.n_max, p.birth_rate, p.beta)?;
            if p.x0 > p.n_max {
                return Err(Error::InvalidInput("x0 above the truncation".into()));
            }
            let mu = schlogl_mean_on_grid(&spec, p.x0, numerics)?;
            let u_max = 1.0 + config.control_offset.abs() + 1.0;
            let base = ex3_schlogl_control();
            Ok(Assembled {
                gen: spec.reference_generator()?,
                intensity: Box::new(ex3_intensity(&spec, u_max, p.n_max as f64)?),
                control: offset_control(base, config.control_offset),
                cost: Some(ex3_cost_spec()),
                mean: Some(mu),
                initial: InitialLaw::Point(p.x0),
                control_set: (0.0, u_max),
                stationarity_tol: 1e-6,
            })
        }
        Problem::Custom(p) => {
            let gen = custom_generator(&p)?;
            if gen.index_of(p.x0).is_none() {
                return Err(Error::InvalidInput("x0 outside the state list".into()));
            }
            Ok(Assembled {
                intensity: Box::new(OwnedGeneratorIntensity::new(gen.clone())),
                control: Box::new(ConstantControl(0.0)),
                cost: None,
                mean: None,
                initial: InitialLaw::Point(p.x0),
                control_set: (0.0, 1.0),
                stationarity_tol: 1e-6,
                gen,
            })
        }
    }
}

fn custom_generator(p: &CustomParams) -> Result<GeneratorMatrix> {
    validate_generator(&p.rates, &p.states)
}

fn offset_control(base: impl ControlSignal + 'static, offset: f64) -> Box<dyn ControlSignal> {
    if offset == 0.0 {
        Box::new(base)
    } else {
        Box::new(OwnedOffset {
            base: Box::new(base),
            offset,
        })
    }
}

struct OwnedOffset {
    base: Box<dyn ControlSignal>,
    offset: f64,
}

impl ControlSignal for OwnedOffset {
    fn value(&self, t: f64, prefix: &Prefix) -> f64 {
        self.base.value(t, prefix) + self.offset
    }
    fn piecewise_constant(&self) -> bool {
        self.base.piecewise_constant()
    }
}

/// Reference chain intensity that owns its generator.
struct OwnedGeneratorIntensity {
    gen: GeneratorMatrix,
}

impl OwnedGeneratorIntensity {
    fn new(gen: GeneratorMatrix) -> Self {
        OwnedGeneratorIntensity { gen }
    }
}

impl Intensity for OwnedGeneratorIntensity {
    fn support(&self) -> &[State] {
        self.gen.states()
    }
    fn rates_into(&self, t: f64, prefix: &Prefix, mean: f64, u: f64, out: &mut [f64]) {
        GeneratorIntensity::new(&self.gen).rates_into(t, prefix, mean, u, out)
    }
    fn rate_bound(&self) -> f64 {
        GeneratorIntensity::new(&self.gen).rate_bound()
    }
    fn piecewise_constant(&self) -> bool {
        true
    }
}

pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<i32> {
    let asm = assemble(config)?;
    let numerics = &config.numerics;
    let paths = simulate_batch(
        asm.intensity.as_ref(),
        asm.mean.as_ref(),
        asm.control.as_ref(),
        &asm.initial,
        numerics.horizon,
        numerics.sim_paths,
        numerics.seed,
    )?;
    let mut manifest = Manifest::new(out)?;
    for (k, path) in paths.iter().enumerate() {
        let mut buf = Vec::new();
        path.write_csv(&mut buf)?;
        manifest.write(&format!("path_{k:03}.csv"), &buf)?;
    }
    let summary = json!({
        "n_paths": paths.len(),
        "mean_jumps": paths.iter().map(|p| p.events().len()).sum::<usize>() as f64
            / paths.len().max(1) as f64,
        "terminal_states": paths.iter().map(|p| p.terminal_state()).collect::<Vec<_>>(),
    });
    manifest.write("summary.json", pretty(&summary).as_bytes())?;
    manifest.finish()?;
    Ok(0)
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

pub fn cmd_validate(config: &RunConfig, out: &Path) -> Result<i32> {
    let asm = assemble(config)?;
    let numerics = &config.numerics;
    let mut checks: Vec<Check> = Vec::new();

    // Reference-measure sample for the structural checks.
    let ref_intensity = GeneratorIntensity::new(&asm.gen);
    let x0 = match &asm.initial {
        InitialLaw::Point(s) => *s,
        InitialLaw::Categorical(pairs) => pairs[0].0,
    };
    let ref_paths = simulate_batch(
        &ref_intensity,
        None,
        &ConstantControl(0.0),
        &asm.initial,
        numerics.horizon,
        numerics.n_paths,
        numerics.seed,
    )?;

    let residual_ok = ref_paths
        .iter()
        .all(|p| path_statistics(p).representation_residual == 0);
    checks.push(Check {
        name: "representation_residual",
        pass: residual_ok,
        detail: format!("{} paths", ref_paths.len()),
    });

    let occupation_ok = ref_paths.iter().all(|p| {
        let total: f64 = path_statistics(p).occupation.values().sum();
        (total - numerics.horizon).abs() < 1e-9
    });
    checks.push(Check {
        name: "occupation_sums_to_horizon",
        pass: occupation_ok,
        detail: String::new(),
    });

    let diffs: Vec<f64> = ref_paths
        .iter()
        .map(|p| {
            let v = optional_variation(p, &asm.gen);
            v.optional - v.predictable
        })
        .collect();
    let (mv, sv) = mean_se_local(&diffs);
    checks.push(Check {
        name: "optional_vs_predictable_variation",
        pass: mv.abs() <= 3.0 * sv,
        detail: format!("{mv:.5} +- {sv:.5}"),
    });

    let id = |s: State| s as f64;
    let residuals: Vec<f64> = ref_paths
        .iter()
        .map(|p| dynkin_residual(p, &asm.gen, &id))
        .collect();
    let (md, sd) = mean_se_local(&residuals);
    checks.push(Check {
        name: "dynkin_residual_identity",
        pass: md.abs() <= 3.0 * sd,
        detail: format!("{md:.5} +- {sd:.5}"),
    });

    // Two-state occupancy against the closed form.
    if asm.gen.n() == 2 {
        let p_up = asm.gen.rate(0, 1);
        let p_down = asm.gen.rate(1, 0);
        let t = numerics.horizon;
        let from_first = p_up / (p_up + p_down) * (1.0 - (-(p_up + p_down) * t).exp());
        let hits: Vec<f64> = ref_paths
            .iter()
            .filter(|p| p.x0() == asm.gen.states()[0])
            .map(|p| {
                if p.terminal_state() == asm.gen.states()[1] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        if hits.len() > 1 {
            let (mh, sh) = mean_se_local(&hits);
            checks.push(Check {
                name: "two_state_occupancy_law",
                pass: (mh - from_first).abs() <= 3.0 * sh.max(1e-12),
                detail: format!("{mh:.5} vs {from_first:.5}"),
            });
        }
    }

    // Measure-change identities under the problem's control.
    let report = martingale_checks(
        asm.intensity.as_ref(),
        &asm.gen,
        asm.control.as_ref(),
        asm.mean.as_ref(),
        x0,
        numerics.horizon,
        numerics.n_paths,
        numerics.seed + 1,
    )?;
    checks.push(Check {
        name: "martingale_checks",
        pass: report.all_pass(),
        detail: format!("mean L = {:.5} +- {:.5}", report.mean_l, report.se_l),
    });

    // Estimator agreement and stationarity only where a cost is defined.
    if let Some(cost) = &asm.cost {
        let direct = estimate_cost_direct(
            cost,
            asm.intensity.as_ref(),
            asm.control.as_ref(),
            asm.mean.as_ref(),
            &asm.initial,
            numerics.horizon,
            numerics.n_paths,
            numerics.grid_cells,
            numerics.seed + 2,
        )?;
        let rew = estimate_cost_reweighted(
            cost,
            asm.intensity.as_ref(),
            &asm.gen,
            asm.control.as_ref(),
            asm.mean.as_ref(),
            &asm.initial,
            numerics.horizon,
            numerics.n_paths,
            numerics.grid_cells,
            numerics.seed + 3,
        )?;
        checks.push(Check {
            name: "estimator_agreement",
            pass: direct.agrees_with(&rew, 3.0),
            detail: format!(
                "direct {:.5} +- {:.5} vs reweighted {:.5} +- {:.5}",
                direct.value, direct.standard_error, rew.value, rew.standard_error
            ),
        });

        let field = problem_field(config, &asm)?;
        let sample: Vec<JumpPath> = ref_paths.iter().take(50).cloned().collect();
        let running = |_t: f64, _x: State, v: f64| 0.5 * v * v;
        let stat = check_stationarity(
            &field,
            asm.intensity.as_ref(),
            &asm.gen,
            &running,
            asm.control.as_ref(),
            asm.mean.as_ref(),
            &sample,
        );
        checks.push(Check {
            name: "stationarity",
            pass: stat.max_abs_derivative <= asm.stationarity_tol,
            detail: format!(
                "max |dH/dv| = {:.2e} (tol {:.0e})",
                stat.max_abs_derivative, asm.stationarity_tol
            ),
        });
    }

    let all_pass = checks.iter().all(|c| c.pass);
    let doc = json!({
        "all_pass": all_pass,
        "checks": checks
            .iter()
            .map(|c| json!({ "name": c.name, "pass": c.pass, "detail": c.detail }))
            .collect::<Vec<_>>(),
    });
    let mut manifest = Manifest::new(out)?;
    manifest.write("validation.json", pretty(&doc).as_bytes())?;
    manifest.finish()?;
    Ok(if all_pass { 0 } else { 1 })
}

/// Backward field for the problem's closed-form identification.
fn problem_field(config: &RunConfig, asm: &Assembled) -> Result<AdjointField> {
    let grid = grid_nodes(&config.numerics);
    match config.problem()? {
        Problem::Ex1(p) => {
            let spec = ex1_spec_from(&p)?;
            solve_adjoint_ode(&ex1_driver(&spec), &asm.gen, &grid)
        }
        Problem::Ex2(p) => {
            let spec = ex2_spec_from(&p)?;
            let mu = asm.mean.clone().expect("ex2 carries a mean curve");
            solve_adjoint_ode(
                &ex2_driver(&spec, ex2_consistent_dynamics(&p), mu),
                &asm.gen,
                &grid,
            )
        }
        Problem::Schlogl(p) => {
            let spec = SchloglSpec::banded(p.n_max, p.birth_rate, p.beta)?;
            solve_adjoint_ode(&ex3_driver(&spec), &asm.gen, &grid)
        }
        Problem::Custom(_) => Err(Error::InvalidInput(
            "custom problems have no costate identification".into(),
        )),
    }
}

pub fn cmd_riccati_table(config: &RunConfig, out: &Path) -> Result<i32> {
    let ranges = config
        .table
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("riccati-table needs a `table` block".into()))?;
    for &(a, b) in &ranges.pairs {
        if a >= b {
            return Err(Error::InvalidInput(format!("need a < b, got ({a}, {b})")));
        }
    }
    let rows = exit_time_table(
        &ranges.pairs,
        &ranges.alphas,
        &ranges.m0s,
        config.numerics.dt,
        config.numerics.t_max,
    )?;
    let mut buf = Vec::new();
    write_exit_time_csv(&rows, &mut buf)?;
    let mut manifest = Manifest::new(out)?;
    manifest.write("table.csv", &buf)?;
    manifest.finish()?;
    Ok(0)
}

pub fn cmd_cost(config: &RunConfig, out: &Path) -> Result<i32> {
    let asm = assemble(config)?;
    let cost = asm
        .cost
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("custom problems have no cost".into()))?;
    let numerics = &config.numerics;
    let direct = estimate_cost_direct(
        cost,
        asm.intensity.as_ref(),
        asm.control.as_ref(),
        asm.mean.as_ref(),
        &asm.initial,
        numerics.horizon,
        numerics.n_paths,
        numerics.grid_cells,
        numerics.seed,
    )?;
    let rew = estimate_cost_reweighted(
        cost,
        asm.intensity.as_ref(),
        &asm.gen,
        asm.control.as_ref(),
        asm.mean.as_ref(),
        &asm.initial,
        numerics.horizon,
        numerics.n_paths,
        numerics.grid_cells,
        numerics.seed,
    )?;
    let doc = cost_pair_json(&direct, &rew);
    let mut manifest = Manifest::new(out)?;
    manifest.write("cost.json", pretty(&doc).as_bytes())?;
    manifest.finish()?;
    Ok(0)
}

fn cost_pair_json(direct: &CostEstimate, rew: &CostEstimate) -> serde_json::Value {
    json!({
        "direct": serde_json::from_str::<serde_json::Value>(&direct.to_json()).unwrap(),
        "reweighted": serde_json::from_str::<serde_json::Value>(&rew.to_json()).unwrap(),
        "agree_within_3_se": direct.agrees_with(rew, 3.0),
    })
}

pub fn cmd_solve(config: &RunConfig, out: &Path) -> Result<i32> {
    let asm = assemble(config)?;
    let numerics = &config.numerics;
    let grid = grid_nodes(numerics);
    let states = asm.gen.states().to_vec();
    let n = states.len();
    let cells = grid.len() - 1;

    // The coupled loop: mean fixed point under the current control, then
    // the backward sweep, then pointwise Hamiltonian maximization.
    let mut control_values = vec![vec![0.0; n]; cells];
    let mut mu: Option<MeanCurve> = asm.mean.clone();
    let mut field = problem_field(config, &asm)?;
    let mut converged = false;
    let mut rounds = 0usize;
    let mean_coupled = matches!(config.problem()?, Problem::Ex2(_) | Problem::Schlogl(_));

    for round in 1..=numerics.max_rounds {
        rounds = round;
        // (a) mean consistency under the current tabulated control.
        if mean_coupled && round > 1 {
            let table =
                TabulatedControl::new(grid.clone(), states.clone(), control_values.clone())?;
            let cfg = FixedPointConfig {
                max_iters: 30,
                damping: numerics.damping,
                tol: numerics.tol,
                n_paths: numerics.n_paths.min(20_000),
            };
            let sol = solve_mean_fixed_point(
                asm.intensity.as_ref(),
                &asm.gen,
                &table,
                &|s| s as f64,
                "identity",
                &asm.initial,
                numerics.horizon,
                cells,
                &cfg,
                numerics.seed,
            )?;
            mu = Some(sol.curve);
        }

        // (b) backward sweep with the current mean.
        field = match config.problem()? {
            Problem::Ex1(p) => {
                let spec = ex1_spec_from(&p)?;
                solve_adjoint_ode(&ex1_driver(&spec), &asm.gen, &grid)?
            }
            Problem::Ex2(p) => {
                let spec = ex2_spec_from(&p)?;
                solve_adjoint_ode(
                    &ex2_driver(
                        &spec,
                        ex2_consistent_dynamics(&p),
                        mu.clone().expect("mean-coupled"),
                    ),
                    &asm.gen,
                    &grid,
                )?
            }
            Problem::Schlogl(p) => {
                let spec = SchloglSpec::banded(p.n_max, p.birth_rate, p.beta)?;
                solve_adjoint_ode(&ex3_driver(&spec), &asm.gen, &grid)?
            }
            Problem::Custom(_) => {
                return Err(Error::InvalidInput(
                    "solve needs ex1, ex2 or schlogl".into(),
                ))
            }
        };

        // (c) control update by Hamiltonian maximization per cell/state.
        let mut change = 0.0f64;
        let mut next = vec![vec![0.0; n]; cells];
        for (k, slot) in next.iter_mut().enumerate() {
            let t_mid = 0.5 * (grid[k] + grid[k + 1]);
            let mean_here = mu.as_ref().map_or(0.0, |c| c.value_before(t_mid));
            for (i, value) in slot.iter_mut().enumerate() {
                let resident = JumpPath::new(states[i], vec![], numerics.horizon)?;
                let prefix = Prefix::of(&resident);
                let rates_at = |v: f64, out: &mut [f64]| {
                    asm.intensity.rates_into(t_mid, &prefix, mean_here, v, out);
                };
                let running = |v: f64| 0.5 * v * v;
                let ham = Hamiltonian {
                    gen: &asm.gen,
                    state_index: i,
                    rates_at: &rates_at,
                    running: &running,
                };
                let q_row = field.q_row(field.node_before(t_mid), i);
                *value = maximize_hamiltonian(&ham, &q_row, asm.control_set.0, asm.control_set.1)?;
                change = change.max((*value - control_values[k][i]).abs());
            }
        }
        control_values = next;
        if change <= numerics.outer_tol {
            converged = true;
            break;
        }
    }

    // Closed-form comparison.
    let (cf_name, cf_delta) =
        closed_form_delta(config, &grid, &states, &control_values, mu.as_ref())?;

    let mut manifest = Manifest::new(out)?;
    let mut buf = Vec::new();
    field.write_csv(&mut buf)?;
    manifest.write("phi.csv", &buf)?;
    if let Some(curve) = &mu {
        let mut buf = Vec::new();
        curve.write_csv(&mut buf)?;
        manifest.write("mu.csv", &buf)?;
    }
    let control_doc = json!({
        "type": "tabulated",
        "grid": grid,
        "states": states,
        "values": control_values,
        "rounds": rounds,
        "converged": converged,
        "closed_form": cf_name,
        "closed_form_max_delta": cf_delta,
    });
    manifest.write("control.json", pretty(&control_doc).as_bytes())?;
    manifest.finish()?;
    Ok(if converged { 0 } else { 1 })
}

/// Sup distance of the tabulated control to the problem's closed form.
fn closed_form_delta(
    config: &RunConfig,
    grid: &[f64],
    states: &[State],
    values: &[Vec<f64>],
    mu: Option<&MeanCurve>,
) -> Result<(String, f64)> {
    let mut delta = 0.0f64;
    match config.problem()? {
        Problem::Ex1(p) => {
            let spec = ex1_spec_from(&p)?;
            for row in values {
                for (i, &v) in row.iter().enumerate() {
                    let expected = spec.h(states[i]) - spec.h_a;
                    delta = delta.max((v - expected).abs());
                }
            }
            Ok(("h(x) - h(a)".into(), delta))
        }
        Problem::Ex2(p) => {
            // Against the tabulated-coefficient mean ODE curve.
            let params = ex2_riccati_coeffs(p.a, p.b, p.alpha).with_m0(p.m0);
            let (printed, _) =
                solve_constrained_riccati(&params, config.numerics.dt, config.numerics.horizon)?;
            let gap = (p.b * p.b) as f64 - (p.a * p.a) as f64;
            for (k, row) in values.iter().enumerate() {
                let t_mid = 0.5 * (grid[k] + grid[k + 1]);
                for (i, &v) in row.iter().enumerate() {
                    let expected = if states[i] == p.b {
                        gap + 2.0 * printed.interpolate(t_mid) * (p.a as f64 - p.b as f64)
                    } else {
                        0.0
                    };
                    delta = delta.max((v - expected).abs());
                }
            }
            let _ = mu;
            Ok(("(b^2-a^2) + 2 mu (a-b) on b".into(), delta))
        }
        Problem::Schlogl(_) => {
            for row in values {
                for (i, &v) in row.iter().enumerate() {
                    let expected = if states[i] == 0 { 0.0 } else { 1.0 };
                    delta = delta.max((v - expected).abs());
                }
            }
            Ok(("1 - I_0".into(), delta))
        }
        Problem::Custom(_) => Ok(("none".into(), f64::NAN)),
    }
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serialization")
}

fn mean_se_local(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
