//! Adam with bias correction, plus global-norm gradient clipping.
//! Both are pure: they return new values and never mutate their inputs.

use super::NumError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(n_params: usize, hyper: AdamHyper) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            hyper,
        }
    }
}

/// One Adam update. The step counter is incremented before bias correction,
/// so the first call uses t = 1.
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamState,
) -> Result<(Vec<f64>, AdamState), NumError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumError::LengthMismatch {
            op: "adam_step",
            left: params.len(),
            right: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NumError::NonFinite { op: "adam_step" });
    }
    let h = state.hyper;
    let t = state.step + 1;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    let mut new = AdamState {
        step: t,
        m: Vec::with_capacity(params.len()),
        v: Vec::with_capacity(params.len()),
        hyper: h,
    };
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let m = h.beta1 * state.m[i] + (1.0 - h.beta1) * grads[i];
        let v = h.beta2 * state.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        out.push(params[i] - h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon));
        new.m.push(m);
        new.v.push(v);
    }
    Ok((out, new))
}

/// Scales `grads` so the global L2 norm is at most `c`; identity when the
/// norm is already within bound (inclusive).
pub fn clip_global_norm(grads: &[f64], c: f64) -> Vec<f64> {
    debug_assert!(c > 0.0);
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm <= c {
        grads.to_vec()
    } else {
        let s = c / norm;
        grads.iter().map(|g| g * s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_unit_update() {
        // with zero state, m_hat = g and v_hat = g^2, so the update is
        // -lr * g / (|g| + eps)
        let hyper = AdamHyper::default();
        let state = AdamState::new(3, hyper);
        let params = [1.0, -2.0, 0.5];
        let grads = [0.3, -0.7, 2.0];
        let (p2, s2) = adam_step(&params, &grads, &state).unwrap();
        assert_eq!(s2.step, 1);
        for i in 0..3 {
            let want = params[i] - hyper.learning_rate * grads[i] / (grads[i].abs() + hyper.epsilon);
            assert!((p2[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let state = AdamState::new(2, AdamHyper::default());
        let params = [0.4, -1.1];
        let (p2, _) = adam_step(&params, &[0.0, 0.0], &state).unwrap();
        assert_eq!(p2, params.to_vec());
    }

    #[test]
    fn two_steps_match_hand_computed_moments() {
        let hyper = AdamHyper {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        };
        let p0 = [0.5];
        let g1 = [0.2];
        let g2 = [-0.4];
        let (p1, s1) = adam_step(&p0, &g1, &AdamState::new(1, hyper)).unwrap();
        let (p2, s2) = adam_step(&p1, &g2, &s1).unwrap();

        // hand recursion
        let m1 = 0.1 * g1[0];
        let v1 = 0.01 * g1[0] * g1[0];
        let p1_want = p0[0] - 0.1 * (m1 / 0.1) / ((v1 / 0.01).sqrt() + 1e-8);
        assert!((p1[0] - p1_want).abs() < 1e-14);
        let m2 = 0.9 * m1 + 0.1 * g2[0];
        let v2 = 0.99 * v1 + 0.01 * g2[0] * g2[0];
        let bc1 = 1.0 - 0.9f64.powi(2);
        let bc2 = 1.0 - 0.99f64.powi(2);
        let p2_want = p1_want - 0.1 * (m2 / bc1) / ((v2 / bc2).sqrt() + 1e-8);
        assert!((p2[0] - p2_want).abs() < 1e-14);
        assert_eq!(s2.step, 2);
    }

    #[test]
    fn nonfinite_gradient_errors() {
        let state = AdamState::new(1, AdamHyper::default());
        assert!(adam_step(&[0.0], &[f64::NAN], &state).is_err());
    }

    #[test]
    fn clip_boundary_is_identity() {
        assert_eq!(clip_global_norm(&[3.0, 4.0], 5.0), vec![3.0, 4.0]);
    }

    #[test]
    fn clip_scales_above_bound() {
        let got = clip_global_norm(&[6.0, 8.0], 5.0);
        assert!((got[0] - 3.0).abs() < 1e-12);
        assert!((got[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn clip_never_exceeds_bound() {
        let g = [10.0, -3.0, 0.25, 7.5];
        for c in [0.1, 1.0, 5.0, 100.0] {
            let out = clip_global_norm(&g, c);
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= c + 1e-12);
        }
    }
}
