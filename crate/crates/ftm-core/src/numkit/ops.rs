//! Elementwise and matrix primitives with their backward passes.

use super::NumError;
use rand::Rng;

/// Numerically stable softmax (max-subtracted). Output is a probability
/// vector: entries >= 0 summing to 1.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>, NumError> {
    if v.is_empty() {
        return Err(NumError::EmptyInput { op: "softmax" });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumError::NonFinite { op: "softmax" });
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Gradient of a loss through softmax: given the softmax output `y` and the
/// upstream gradient `dy`, returns the gradient w.r.t. the logits.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)).collect()
}

/// Softmax over the positions where `mask` is true; masked positions get
/// exactly zero weight. Errors if no position is valid.
pub fn masked_softmax(v: &[f64], mask: &[bool]) -> Result<Vec<f64>, NumError> {
    if v.len() != mask.len() {
        return Err(NumError::LengthMismatch {
            op: "masked_softmax",
            left: v.len(),
            right: mask.len(),
        });
    }
    let mut max = f64::NEG_INFINITY;
    for (x, &m) in v.iter().zip(mask) {
        if m && *x > max {
            max = *x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(NumError::AllMasked);
    }
    let mut out = vec![0.0; v.len()];
    let mut sum = 0.0;
    for i in 0..v.len() {
        if mask[i] {
            out[i] = (v[i] - max).exp();
            sum += out[i];
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub x_hat: Vec<f64>,
    pub inv_std: f64,
}

/// y = gamma .* (x - mean) / sqrt(var + eps) + beta
pub fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormCache), NumError> {
    if x.is_empty() {
        return Err(NumError::EmptyInput { op: "layer_norm" });
    }
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(NumError::LengthMismatch {
            op: "layer_norm",
            left: x.len(),
            right: gamma.len().max(beta.len()),
        });
    }
    if eps <= 0.0 {
        return Err(NumError::InvalidArgument {
            op: "layer_norm",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let x_hat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = x_hat
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((xh, g), b)| g * xh + b)
        .collect();
    Ok((y, LayerNormCache { x_hat, inv_std }))
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = dy.len();
    let nf = n as f64;
    let dgamma: Vec<f64> = dy
        .iter()
        .zip(&cache.x_hat)
        .map(|(d, xh)| d * xh)
        .collect();
    let dbeta: Vec<f64> = dy.to_vec();
    let dx_hat: Vec<f64> = dy.iter().zip(gamma).map(|(d, g)| d * g).collect();
    let sum_dx_hat: f64 = dx_hat.iter().sum();
    let sum_dx_hat_x_hat: f64 = dx_hat.iter().zip(&cache.x_hat).map(|(a, b)| a * b).sum();
    let dx = (0..n)
        .map(|i| {
            cache.inv_std * (dx_hat[i] - sum_dx_hat / nf - cache.x_hat[i] * sum_dx_hat_x_hat / nf)
        })
        .collect();
    (dx, dgamma, dbeta)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
        .collect()
}

/// y = x W + b, with W stored row-major as (in_dim x out_dim).
pub fn linear(x: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(b.len(), out_dim);
    let mut y = b.to_vec();
    for i in 0..in_dim {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
    y
}

/// Backward of `linear`: accumulates into dw/db, returns dx.
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    in_dim: usize,
    out_dim: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; in_dim];
    for i in 0..in_dim {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        let drow = &mut dw[i * out_dim..(i + 1) * out_dim];
        let xi = x[i];
        let mut acc = 0.0;
        for j in 0..out_dim {
            acc += row[j] * dy[j];
            drow[j] += xi * dy[j];
        }
        dx[i] = acc;
    }
    for (dbj, dyj) in db.iter_mut().zip(dy) {
        *dbj += dyj;
    }
    dx
}

/// C = A B. A is (m x k), B is (k x n), C is (m x n); all row-major.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C = A B^T. A is (m x k), B is (n x k), C is (m x n).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C = A^T B. A is (k x m), B is (k x n), C is (m x n).
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// dW += x y^T scatter, for rank-1 parameter updates.
pub fn add_outer_product(dw: &mut [f64], x: &[f64], y: &[f64]) {
    let n = y.len();
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n..(i + 1) * n];
        for (r, yj) in row.iter_mut().zip(y) {
            *r += xi * yj;
        }
    }
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else
/// 1/(1-rate), so the expected activation is unchanged.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    debug_assert!((0.0..1.0).contains(&rate));
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_symmetry() {
        let y = softmax(&[0.0, 0.0]).unwrap();
        assert_close(y[0], 0.5, 1e-15);
        assert_close(y[1], 0.5, 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let v = [0.3, -1.2, 2.5, 0.0, 1.1];
        let a = softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + 7.25).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        // Brute-force oracle: plain exp/sum at f64 on a fixed 5-vector.
        let v = [0.91f64, -0.33, 1.57, -2.04, 0.48];
        let sum: f64 = v.iter().map(|x| x.exp()).sum();
        let oracle: Vec<f64> = v.iter().map(|x| x.exp() / sum).collect();
        let got = softmax(&v).unwrap();
        for (a, b) in got.iter().zip(&oracle) {
            assert_close(*a, *b, 1e-12);
        }
        let total: f64 = got.iter().sum();
        assert_close(total, 1.0, 1e-12);
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn layer_norm_constant_input_is_zeroed() {
        let x = [3.7; 6];
        let gamma = [1.0; 6];
        let beta = [0.0; 6];
        let (y, _) = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for v in y {
            assert_close(v, 0.0, 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let (y, _) = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert_close(y[0], 1.0, 1e-6);
        assert_close(y[1], -1.0, 1e-6);
    }

    #[test]
    fn layer_norm_matches_independent_mean_var() {
        let x = [0.2, -1.4, 3.3, 0.9];
        let gamma = [1.1, 0.9, 1.3, 0.7];
        let beta = [0.1, -0.2, 0.0, 0.5];
        let eps = 1e-6;
        let mean: f64 = x.iter().sum::<f64>() / 4.0;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let (y, _) = layer_norm(&x, &gamma, &beta, eps).unwrap();
        for i in 0..4 {
            let want = gamma[i] * (x[i] - mean) / (var + eps).sqrt() + beta[i];
            assert_close(y[i], want, 1e-12);
        }
    }

    #[test]
    fn layer_norm_length_mismatch_errors() {
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let w = masked_softmax(&[1.0, 99.0, 2.0], &[true, false, true]).unwrap();
        assert_eq!(w[1], 0.0);
        assert_close(w[0] + w[2], 1.0, 1e-12);
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        assert!(matches!(
            masked_softmax(&[1.0, 2.0], &[false, false]),
            Err(NumError::AllMasked)
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        // A (2x3), B (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // B^T stored as (2x3) rows = columns of B
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        // A^T stored as (3x2)
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 2, 3, 2), c);
    }

    #[test]
    fn dropout_mask_is_identity_at_rate_zero() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m = dropout_mask(8, 0.0, &mut rng);
        assert!(m.iter().all(|v| *v == 1.0));
    }
}
