//! Shared test oracles, independent of the library's computation paths.

#![allow(dead_code)]

/// Dense matrix exponential `e^{A t}` by scaling-and-squaring on the
/// Taylor series. Row-generator convention: for a Q-matrix `G`, the
/// transition probabilities are `P(t) = e^{G t}` with `P[i][j] =
/// P(x(t) = j | x(0) = i)`.
pub fn expm(a: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    let n = a.len();
    let norm: f64 = a
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        * t.abs();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = t / 2f64.powi(squarings as i32);

    let scaled: Vec<Vec<f64>> = a
        .iter()
        .map(|row| row.iter().map(|v| v * scale).collect())
        .collect();

    // Taylor series sum_k scaled^k / k!.
    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=24 {
        term = matmul(&term, &scaled);
        for row in term.iter_mut() {
            for v in row.iter_mut() {
                *v /= k as f64;
            }
        }
        for i in 0..n {
            for j in 0..n {
                result[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result);
    }
    result
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Sample mean and standard error, recomputed independently of the
/// library helpers.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn expm_of_zero_is_identity() {
    let z = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    let e = expm(&z, 1.0);
    assert!((e[0][0] - 1.0).abs() < 1e-14 && e[0][1].abs() < 1e-14);
}

#[test]
fn expm_matches_two_state_closed_form() {
    // For G = [[-p, p], [q, -q]], P(x(t)=1 | x(0)=0) =
    // p/(p+q) (1 - e^{-(p+q) t}).
    let (p, q, t) = (0.7, 1.3, 0.9);
    let g = vec![vec![-p, p], vec![q, -q]];
    let e = expm(&g, t);
    let expected = p / (p + q) * (1.0 - (-(p + q) * t).exp());
    assert!(
        (e[0][1] - expected).abs() < 1e-12,
        "{} vs {expected}",
        e[0][1]
    );
}
