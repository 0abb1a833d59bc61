//! Central-difference gradient verification.

use super::NumError;

/// Compares `analytic` against central finite differences of `f` at
/// `params`, returning the maximum per-coordinate relative error
/// |analytic - numeric| / max(1, |analytic|).
///
/// `epsilon` around 1e-5 is appropriate at f64.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<f64, NumError>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(NumError::LengthMismatch {
            op: "finite_difference_check",
            left: params.len(),
            right: analytic.len(),
        });
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + epsilon;
        let up = f(&work);
        work[i] = orig - epsilon;
        let down = f(&work);
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumError::NonFinite {
                op: "finite_difference_check",
            });
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::softmax;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        // f(x) = sum a_i x_i^2, df/dx_i = 2 a_i x_i
        let a = [0.5, -1.25, 2.0];
        let x = [0.3, 1.7, -0.9];
        let grad: Vec<f64> = a.iter().zip(&x).map(|(ai, xi)| 2.0 * ai * xi).collect();
        let f = |p: &[f64]| a.iter().zip(p).map(|(ai, pi)| ai * pi * pi).sum::<f64>();
        let err = finite_difference_check(f, &x, &grad, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn softmax_bce_composite_passes() {
        // loss = -log softmax(v)[0]
        let v = [0.2, -1.1, 0.7, 0.05];
        let y = softmax(&v).unwrap();
        // d/dv_j of -log p_0 = p_j - [j == 0]
        let grad: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(j, p)| p - if j == 0 { 1.0 } else { 0.0 })
            .collect();
        let f = |p: &[f64]| -softmax(p).unwrap()[0].ln();
        let err = finite_difference_check(f, &v, &grad, 1e-5).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let v = [0.2, -1.1, 0.7, 0.05];
        let y = softmax(&v).unwrap();
        let mut grad: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(j, p)| p - if j == 0 { 1.0 } else { 0.0 })
            .collect();
        grad[2] += 0.05; // deliberate bug
        let f = |p: &[f64]| -softmax(p).unwrap()[0].ln();
        let err = finite_difference_check(f, &v, &grad, 1e-5).unwrap();
        assert!(err > 1e-2, "err = {err}");
    }
}
