//! Costate fields and stationarity on the model problems.

mod common;

use mfchain::adjoint::*;
use mfchain::chain::*;
use mfchain::examples::*;
use mfchain::girsanov::likelihood_ratio_field;
use mfchain::meanfield::MeanCurve;

fn ex1_spec() -> TwoStateSpec {
    TwoStateSpec::new(0, 1, 0.5, 1.0, 1.0, 0.0, 1.0).unwrap()
}

fn field_grid(cells: usize) -> Vec<f64> {
    (0..=cells).map(|k| k as f64 / cells as f64).collect()
}

fn sample_paths(gen: &GeneratorMatrix, x0: State, n: usize, seed: u64) -> Vec<JumpPath> {
    let intensity = GeneratorIntensity::new(gen);
    simulate_batch(
        &intensity,
        None,
        &ConstantControl(0.0),
        &InitialLaw::Point(x0),
        1.0,
        n,
        seed,
    )
    .unwrap()
}

#[test]
fn assembled_inner_product_matches_b_row_driver_value() {
    // <ell, q>_g - u^2/2 at state b collapses to q_ba (q_ba/2 - g_ba)
    // when u = q_ba.
    let spec = ex1_spec();
    let gen = spec.generator();
    let intensity = ex1_intensity(&spec, 4.0);
    let field = likelihood_ratio_field(&intensity, &gen);
    let path = JumpPath::new(1, vec![], 1.0).unwrap();
    let (_, q_ba) = ex1_adjoint_closed_form(&spec);
    let ell = field.ell_row(0.5, &Prefix::of(&path), 0.0, q_ba).unwrap();
    let q_row = [q_ba, 0.0];
    let value = g_inner(&ell, &q_row, &gen, 1) - 0.5 * q_ba * q_ba;
    let expected = q_ba * (0.5 * q_ba - spec.g_ba);
    assert!((value - expected).abs() < 1e-12);
}

#[test]
fn ex1_stationarity_holds_at_closed_form_control() {
    let spec = ex1_spec();
    let gen = spec.generator();
    let grid = field_grid(256);
    let field = solve_adjoint_ode(&ex1_driver(&spec), &gen, &grid).unwrap();
    let intensity = ex1_intensity(&spec, 4.0);
    let control = ex1_optimal_control(&spec);
    let paths = sample_paths(&gen, 0, 50, 7);
    let running = |_t: f64, _x: State, v: f64| 0.5 * v * v;
    let report = check_stationarity(&field, &intensity, &gen, &running, &control, None, &paths);
    assert!(
        report.max_abs_derivative <= 1e-6,
        "max |dH/dv| = {}",
        report.max_abs_derivative
    );
    assert_eq!(report.fraction_within, 1.0);
}

#[test]
fn ex1_stationarity_flags_perturbed_control() {
    let spec = ex1_spec();
    let gen = spec.generator();
    let grid = field_grid(256);
    let field = solve_adjoint_ode(&ex1_driver(&spec), &gen, &grid).unwrap();
    let intensity = ex1_intensity(&spec, 4.0);
    let s = spec;
    let shifted = FeedbackControl::stationary(move |_t, x| s.h(x) - s.h_a + 0.1);
    let paths = sample_paths(&gen, 0, 50, 8);
    let running = |_t: f64, _x: State, v: f64| 0.5 * v * v;
    let report = check_stationarity(&field, &intensity, &gen, &running, &shifted, None, &paths);
    // dH/dv = q - v = -0.1 wherever the chain sits.
    assert!(report.max_abs_derivative > 0.09);
    assert!(report.fraction_within < 1e-9);
}

#[test]
fn ex2_stationarity_holds_within_grid_budget() {
    let spec = TwoStateSpec::new(0, 1, 0.3, 1.0, 1.0, 0.0, 0.0).unwrap();
    let gen = spec.generator();
    let grid = field_grid(256);
    let params = ex2_riccati_coeffs(0, 1, 0.3).with_m0(0.0);
    let (fine, _) = solve_constrained_riccati(&params, 1e-4, 1.0).unwrap();
    // Resample the mean onto the field grid so the control and the
    // backward sweep read the same left-limit values.
    let mu = MeanCurve::uniform(
        1.0,
        grid.iter().map(|&t| fine.interpolate(t)).collect(),
        "identity",
    )
    .unwrap();
    let field = solve_adjoint_ode(&ex2_driver(&spec, params, mu.clone()), &gen, &grid).unwrap();
    let intensity = ex2_intensity(&spec, 1.5, 0.5);
    let control = ex2_optimal_control(&spec, mu.clone());
    let paths = sample_paths(&gen, 0, 50, 9);
    let running = |_t: f64, _x: State, v: f64| 0.5 * v * v;
    let report = check_stationarity(
        &field,
        &intensity,
        &gen,
        &running,
        &control,
        Some(&mu),
        &paths,
    );
    assert!(
        report.max_abs_derivative <= 1e-4,
        "max |dH/dv| = {}",
        report.max_abs_derivative
    );
}

#[test]
fn ex2_mean_term_shifts_hamiltonian_uniformly_in_control() {
    // The mean enters the b-state Hamiltonian only additively, so the
    // maximizer stays at the q vertex for any mean value.
    let spec = TwoStateSpec::new(0, 1, 0.3, 1.0, 1.0, 0.0, 0.0).unwrap();
    let gen = spec.generator();
    let intensity = ex2_intensity(&spec, 3.0, 1.0);
    let path = JumpPath::new(1, vec![], 1.0).unwrap();
    let prefix = Prefix::of(&path);
    let q_row = [0.4, 0.0];
    let mut values = Vec::new();
    for mean in [0.1, 0.45] {
        let rates_at = |v: f64, out: &mut [f64]| intensity.rates_into(0.5, &prefix, mean, v, out);
        let running = |v: f64| 0.5 * v * v;
        let ham = Hamiltonian {
            gen: &gen,
            state_index: 1,
            rates_at: &rates_at,
            running: &running,
        };
        let vstar = maximize_hamiltonian(&ham, &q_row, 0.0, 3.0).unwrap();
        assert!((vstar - 0.4).abs() < 1e-9, "vertex moved to {vstar}");
        values.push(
            hamiltonian_value(&ham, 1.0, 1.0, &q_row) - hamiltonian_value(&ham, 0.0, 1.0, &q_row),
        );
    }
    // H(1) - H(0) is mean-independent.
    assert!((values[0] - values[1]).abs() < 1e-12);
}

#[test]
fn schlogl_stationarity_holds_at_indicator_control() {
    let spec = SchloglSpec::banded(20, 1.0, 0.1).unwrap();
    let gen = spec.reference_generator().unwrap();
    let grid = field_grid(128);
    let field = solve_adjoint_ode(&ex3_driver(&spec), &gen, &grid).unwrap();
    let intensity = ex3_intensity(&spec, 1.0, 20.0).unwrap();
    let control = ex3_schlogl_control();
    let mu = MeanCurve::constant(1.0, 129, 5.0, "identity");
    let paths = sample_paths(&gen, 5, 50, 10);
    let running = |_t: f64, _x: State, v: f64| 0.5 * v * v;
    let report = check_stationarity(
        &field,
        &intensity,
        &gen,
        &running,
        &control,
        Some(&mu),
        &paths,
    );
    assert!(
        report.max_abs_derivative <= 1e-6,
        "max |dH/dv| = {}",
        report.max_abs_derivative
    );
}
