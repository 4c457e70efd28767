//! Small numeric helpers: deterministic summation, quadrature, statistics.

/// Pairwise (cascade) summation. Deterministic for a given slice,
/// independent of thread count, and more accurate than a running sum.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Sample mean and standard error of the mean.
///
/// The standard error is `sd / sqrt(n)` with the unbiased variance.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n >= 2, "mean_se needs at least two samples");
    let mean = pairwise_sum(xs) / n as f64;
    let sq: Vec<f64> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
///
/// Terminates immediately for integrands that are constant or low-order
/// polynomials on the interval, which is the common case here (rates
/// piecewise constant between grid nodes).
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_recurse(f, a, b, fa, fm, fb, whole, tol, 20)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Format a float with 17 significant digits for CSV output.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
