//! Central finite-difference oracle for verifying analytic gradients.

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest relative error between two gradient vectors.
/// The denominator floor absorbs finite-difference noise (about h^2) on
/// entries whose true gradient is near zero.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2), grad = 2x
        let x = [0.3, -1.2, 2.0];
        let g = central_difference(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        let expect: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(max_rel_err(&expect, &g) < 1e-9);
    }
}
