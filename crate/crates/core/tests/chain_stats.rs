//! Statistical checks of the sampler against independent oracles.

mod common;

use common::{expm, mean_se};
use mfchain::chain::*;
use mfchain::examples::{ex3_intensity, SchloglSpec};

const N: usize = 20_000;

fn two_state(g_ab: f64, g_ba: f64) -> GeneratorMatrix {
    validate_generator(&[vec![-g_ab, g_ab], vec![g_ba, -g_ba]], &[0, 1]).unwrap()
}

#[test]
fn occupancy_matches_matrix_exponential() {
    // Symmetric two-state chain: P(x(1)=1 | x(0)=0) = (1 - e^{-2})/2.
    let gen = two_state(1.0, 1.0);
    let intensity = GeneratorIntensity::new(&gen);
    let paths = simulate_batch(
        &intensity,
        None,
        &ConstantControl(0.0),
        &InitialLaw::Point(0),
        1.0,
        100_000,
        2024,
    )
    .unwrap();
    let hits: Vec<f64> = paths
        .iter()
        .map(|p| if p.terminal_state() == 1 { 1.0 } else { 0.0 })
        .collect();
    let (mean, se) = mean_se(&hits);
    let oracle = expm(&[vec![-1.0, 1.0], vec![1.0, -1.0]], 1.0)[0][1];
    assert!((oracle - (1.0 - (-2.0f64).exp()) / 2.0).abs() < 1e-12);
    assert!(
        (mean - oracle).abs() <= 3.0 * se,
        "empirical {mean} vs oracle {oracle} (se {se})"
    );
}

#[test]
fn occupancy_matches_matrix_exponential_asymmetric() {
    let gen = two_state(0.7, 2.1);
    let intensity = GeneratorIntensity::new(&gen);
    let paths = simulate_batch(
        &intensity,
        None,
        &ConstantControl(0.0),
        &InitialLaw::Point(1),
        1.5,
        N,
        7,
    )
    .unwrap();
    let hits: Vec<f64> = paths
        .iter()
        .map(|p| if p.terminal_state() == 0 { 1.0 } else { 0.0 })
        .collect();
    let (mean, se) = mean_se(&hits);
    let oracle = expm(&[vec![-0.7, 0.7], vec![2.1, -2.1]], 1.5)[1][0];
    assert!(
        (mean - oracle).abs() <= 3.0 * se,
        "empirical {mean} vs oracle {oracle} (se {se})"
    );
}

#[test]
fn representation_residual_vanishes_on_simulated_paths() {
    let spec = SchloglSpec::banded(12, 1.0, 0.0).unwrap();
    let gen = spec.reference_generator().unwrap();
    let intensity = GeneratorIntensity::new(&gen);
    let paths = simulate_batch(
        &intensity,
        None,
        &ConstantControl(0.0),
        &InitialLaw::Point(4),
        2.0,
        5_000,
        99,
    )
    .unwrap();
    for p in &paths {
        let st = path_statistics(p);
        assert_eq!(st.representation_residual, 0);
        let total: f64 = st.occupation.values().sum();
        assert!((total - 2.0).abs() < 1e-9);
    }
}

#[test]
fn dynkin_residual_mean_is_zero() {
    let gen = two_state(1.0, 2.0);
    let intensity = GeneratorIntensity::new(&gen);
    let paths = simulate_batch(
        &intensity,
        None,
        &ConstantControl(0.0),
        &InitialLaw::Point(0),
        1.0,
        N,
        31,
    )
    .unwrap();
    let id = |s: State| s as f64;
    let ind0 = |s: State| if s == 0 { 1.0 } else { 0.0 };
    let ind1 = |s: State| if s == 1 { 1.0 } else { 0.0 };
    for (name, f) in [
        ("identity", &id as &dyn Fn(State) -> f64),
        ("indicator0", &ind0),
        ("indicator1", &ind1),
    ] {
        let residuals: Vec<f64> = paths.iter().map(|p| dynkin_residual(p, &gen, &f)).collect();
        let (mean, se) = mean_se(&residuals);
        assert!(
            mean.abs() <= 3.0 * se,
            "{name}: residual mean {mean} (se {se})"
        );
    }
}

#[test]
fn optional_equals_predictable_variation_in_mean() {
    let gen = two_state(1.3, 0.8);
    let intensity = GeneratorIntensity::new(&gen);
    let paths = simulate_batch(
        &intensity,
        None,
        &ConstantControl(0.0),
        &InitialLaw::Point(0),
        2.0,
        N,
        55,
    )
    .unwrap();
    let diffs: Vec<f64> = paths
        .iter()
        .map(|p| {
            let v = optional_variation(p, &gen);
            v.optional - v.predictable
        })
        .collect();
    let (mean, se) = mean_se(&diffs);
    assert!(mean.abs() <= 3.0 * se, "difference mean {mean} (se {se})");
}

#[test]
fn pure_birth_jump_count_matches_poisson() {
    // beta = 0, u = 0: only the constant birth rate remains, so the jump
    // count over [0, T] is Poisson(rate * T) while the boundary stays
    // unreachable.
    let spec = SchloglSpec::banded(30, 1.0, 0.0).unwrap();
    let intensity = ex3_intensity(&spec, 0.0, 0.0).unwrap();
    let paths = simulate_batch(
        &intensity,
        None,
        &ConstantControl(0.0),
        &InitialLaw::Point(0),
        1.0,
        N,
        123,
    )
    .unwrap();
    let counts: Vec<f64> = paths.iter().map(|p| p.events().len() as f64).collect();
    let (mean, se) = mean_se(&counts);
    assert!(
        (mean - 1.0).abs() <= 3.0 * se,
        "mean jump count {mean} vs Poisson mean 1.0 (se {se})"
    );
    // Every jump is a birth.
    assert!(paths.iter().all(|p| {
        p.events()
            .iter()
            .zip(std::iter::once(&(0.0, p.x0())).chain(p.events().iter()))
            .all(|(next, prev)| next.1 == prev.1 + 1)
    }));
}
