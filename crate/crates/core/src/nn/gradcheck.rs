use crate::error::{Error, Result};

/// Central-difference gradient of `loss` at `params`:
/// `(f(θ + h·e_k) − f(θ − h·e_k)) / 2h` for every coordinate `k`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..theta.len() {
        let orig = theta[k];
        theta[k] = orig + h;
        let plus = loss(&theta);
        theta[k] = orig - h;
        let minus = loss(&theta);
        theta[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {k}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    // Leave the caller's closure state at the original point.
    let _ = loss(&theta);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_is_zero() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = crate::rng::Rng::new(4);
        let theta: Vec<f64> = (0..10).map(|_| rng.normal(0.0, 1.0)).collect();
        let g = finite_diff_grad(|p| p.iter().map(|v| v * v).sum(), &theta, 1e-5).unwrap();
        for (gi, ti) in g.iter().zip(&theta) {
            assert!((gi - 2.0 * ti).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_loss_is_error() {
        let err = finite_diff_grad(|p| if p[0] > 1.0 { f64::NAN } else { p[0] }, &[1.0], 1e-5);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
