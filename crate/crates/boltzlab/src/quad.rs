//! Small one-dimensional rules shared by the modules.

use gauss_quad::GaussLegendre;

/// Gauss-Legendre nodes and weights mapped to [a, b].
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussLegendre::new(n.try_into().expect("rule size must be positive"));
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    rule.iter().map(|(x, w)| (mid + half * x, half * w)).unzip()
}

/// Composite midpoint nodes on [a, b] with a common weight.
pub fn midpoints(n: usize, a: f64, b: f64) -> (Vec<f64>, f64) {
    let h = (b - a) / n as f64;
    ((0..n).map(|k| a + (k as f64 + 0.5) * h).collect(), h)
}
