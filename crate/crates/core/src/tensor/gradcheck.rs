use crate::error::{Error, Result};

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference<G>(f: &G, x: &[f64], i: usize, step: f64) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    probe[i] = x[i] + step;
    let up = f(&probe)?;
    probe[i] = x[i] - step;
    let down = f(&probe)?;
    if !up.is_finite() || !down.is_finite() {
        return Err(Error::NonFinite(format!(
            "function evaluation at coordinate {i}"
        )));
    }
    Ok((up - down) / (2.0 * step))
}

/// Max over `coords` of `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_difference_check<G>(
    f: G,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            x.len()
        )));
    }
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = central_difference(&f, x, i, step)?;
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
