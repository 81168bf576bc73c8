/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let plus = loss(&x);
            x[i] = orig - eps;
            let minus = loss(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

pub const DEFAULT_FD_EPS: f64 = 1e-4;

/// Relative error with an absolute floor, as used by the gradient checks:
/// passes when `|a − b| ≤ rel · max(|a|, |b|)` or `|a − b| ≤ abs_floor`.
pub fn grad_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs_floor || diff <= rel * a.abs().max(b.abs())
}
