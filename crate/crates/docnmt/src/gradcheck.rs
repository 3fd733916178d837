//! Finite-difference utilities used by the verification suites.
//!
//! These deliberately know nothing about the graph's backward pass: they
//! probe any loss closure by central differences, giving an independent
//! route to the same derivative.

/// Central finite differences of `loss` at `at`, step `h` per coordinate.
pub fn central_diff<L>(loss: &L, at: &[f64], h: f64) -> Vec<f64>
where
    L: Fn(&[f64]) -> f64,
{
    let mut work = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = loss(&work);
        work[i] = orig - h;
        let down = loss(&work);
        work[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Relative error with a floor: |a−b| / max(|a|, |b|, 1e-3). The floor
/// keeps finite-difference noise from dominating near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
