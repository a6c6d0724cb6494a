use crate::error::{Error, Result};

/// Compares analytic gradients with central differences.
///
/// `f` maps a flat parameter vector to `(loss, analytic gradient)`. The result
/// is `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("{} params but {} gradients", params.len(), analytic.len()),
        });
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (up, _) = f(&probe)?;
        probe[i] = params[i] - eps;
        let (down, _) = f(&probe)?;
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let err = grad_check(
            |p| Ok((p.iter().map(|v| v * v).sum(), p.iter().map(|v| 2.0 * v).collect())),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function() {
        let err = grad_check(|p| Ok((4.0, vec![0.0; p.len()])), &[1.0, -3.0, 0.5], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        assert!(grad_check(|p| Ok((0.0, vec![0.0; p.len()])), &[1.0], 0.0).is_err());
        assert!(grad_check(|p| Ok((f64::NAN, vec![0.0; p.len()])), &[1.0], 1e-5).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let err = grad_check(|p| Ok((p[0] * p[0], vec![3.0 * p[0]])), &[2.0], 1e-5).unwrap();
        assert!(err > 0.1);
    }
}
