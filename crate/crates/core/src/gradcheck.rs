//! Central finite-difference gradient oracle, used by tests and the
//! verification suite to cross-check backpropagation.

use crate::error::Result;

/// Central differences per scalar parameter with per-coordinate step
/// `step * max(1, |theta_i|)`. The loss closure must be deterministic.
pub fn finite_difference_gradient<F>(mut loss: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let h = step * params[i].abs().max(1.0);
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = loss(&theta)?;
        theta[i] = orig - h;
        let minus = loss(&theta)?;
        theta[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest componentwise deviation `|a_i - b_i| / max(1, |a_i|, |b_i|)`;
/// absolute below one, relative above.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut worst: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(1.0);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_gradient_is_theta() {
        let theta: Vec<f64> = vec![0.5, -1.25, 3.0, 0.0];
        let grad = finite_difference_gradient(
            |p| Ok(0.5 * p.iter().map(|x| x * x).sum::<f64>()),
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&grad, &theta) < 1e-9);
    }

    #[test]
    fn halving_the_step_quarters_the_error() {
        // Quadratics are differenced exactly; use a loss with a third
        // derivative so truncation dominates.
        let theta: Vec<f64> = vec![0.3, -0.8, 1.7];
        let loss = |p: &[f64]| Ok(p.iter().map(|x| x.sin()).sum::<f64>());
        let exact: Vec<f64> = theta.iter().map(|x| x.cos()).collect();

        let err_at = |h: f64| -> f64 {
            let g = finite_difference_gradient(loss, &theta, h).unwrap();
            g.iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let coarse = err_at(1e-3);
        let fine = err_at(5e-4);
        let ratio = coarse / fine;
        assert!(
            (3.0..5.0).contains(&ratio),
            "second-order convergence expected, got ratio {ratio}"
        );
    }
}
