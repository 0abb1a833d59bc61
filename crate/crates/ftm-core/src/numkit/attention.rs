//! Multi-head scaled dot-product self-attention over a T x d_model sequence.
//!
//! Masking happens before the softmax: invalid key positions are excluded
//! from the normalization entirely, so their attention weight is exactly
//! zero and values stored at masked rows can never influence valid outputs.

use super::ops::{masked_softmax, matmul_nn, matmul_nt, matmul_tn};
use super::{NumError, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AttentionDims {
    pub n_heads: usize,
    pub d_head: usize,
}

impl AttentionDims {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }
}

/// Projection weights, each (d_model x d_model) row-major, biases d_model.
#[derive(Debug, Clone, Copy)]
pub struct MhsaParams<'a> {
    pub w_q: &'a [f64],
    pub b_q: &'a [f64],
    pub w_k: &'a [f64],
    pub b_k: &'a [f64],
    pub w_v: &'a [f64],
    pub b_v: &'a [f64],
    pub w_o: &'a [f64],
    pub b_o: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct MhsaGrads {
    pub w_q: Vec<f64>,
    pub b_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub b_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub b_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl MhsaGrads {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            w_q: vec![0.0; d_model * d_model],
            b_q: vec![0.0; d_model],
            w_k: vec![0.0; d_model * d_model],
            b_k: vec![0.0; d_model],
            w_v: vec![0.0; d_model * d_model],
            b_v: vec![0.0; d_model],
            w_o: vec![0.0; d_model * d_model],
            b_o: vec![0.0; d_model],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhsaCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights per head, each T x T.
    weights: Vec<Vec<f64>>,
    ctx: Vec<f64>,
}

fn project(x: &[f64], w: &[f64], b: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = matmul_nn(x, w, t, d, d);
    for row in 0..t {
        for j in 0..d {
            out[row * d + j] += b[j];
        }
    }
    out
}

/// Forward pass. `x` is T x d_model; `mask[t]` marks valid positions.
pub fn mhsa_forward(
    x: &Tensor,
    p: &MhsaParams,
    mask: &[bool],
    dims: AttentionDims,
) -> Result<(Tensor, MhsaCache), NumError> {
    let d = dims.d_model();
    let t = x.rows();
    if x.cols() != d {
        return Err(NumError::ShapeMismatch {
            op: "mhsa_forward",
            expected: vec![t, d],
            got: x.shape().to_vec(),
        });
    }
    if mask.len() != t {
        return Err(NumError::LengthMismatch {
            op: "mhsa_forward",
            left: mask.len(),
            right: t,
        });
    }
    if !mask.iter().any(|m| *m) {
        return Err(NumError::AllMasked);
    }

    let q = project(x.data(), p.w_q, p.b_q, t, d);
    let k = project(x.data(), p.w_k, p.b_k, t, d);
    let v = project(x.data(), p.w_v, p.b_v, t, d);

    let dh = dims.d_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; t * d];
    let mut weights = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let off = h * dh;
        let mut w_head = vec![0.0; t * t];
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let mut logits = vec![0.0; t];
            for (j, logit) in logits.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                *logit = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
            let row = masked_softmax(&logits, mask)?;
            for j in 0..t {
                if row[j] != 0.0 {
                    let vj = &v[j * d + off..j * d + off + dh];
                    let c = &mut ctx[i * d + off..i * d + off + dh];
                    for (cc, vv) in c.iter_mut().zip(vj) {
                        *cc += row[j] * vv;
                    }
                }
            }
            w_head[i * t..(i + 1) * t].copy_from_slice(&row);
        }
        weights.push(w_head);
    }

    let y = project(&ctx, p.w_o, p.b_o, t, d);
    let cache = MhsaCache {
        q,
        k,
        v,
        weights,
        ctx,
    };
    Ok((Tensor::matrix(t, d, y)?, cache))
}

/// Backward pass; returns dx (T x d_model) and accumulates into `grads`.
pub fn mhsa_backward(
    x: &Tensor,
    p: &MhsaParams,
    cache: &MhsaCache,
    dy: &Tensor,
    dims: AttentionDims,
    grads: &mut MhsaGrads,
) -> Tensor {
    let d = dims.d_model();
    let t = x.rows();
    let dh = dims.d_head;
    let scale = 1.0 / (dh as f64).sqrt();

    // output projection: y = ctx W_o + b_o
    let d_ctx = matmul_nt(dy.data(), p.w_o, t, d, d);
    let dwo = matmul_tn(cache.ctx.as_slice(), dy.data(), d, t, d);
    for (g, v) in grads.w_o.iter_mut().zip(&dwo) {
        *g += v;
    }
    for row in 0..t {
        for j in 0..d {
            grads.b_o[j] += dy.data()[row * d + j];
        }
    }

    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    for h in 0..dims.n_heads {
        let off = h * dh;
        let w_head = &cache.weights[h];
        for i in 0..t {
            let dctx_i = &d_ctx[i * d + off..i * d + off + dh];
            // dA[i][j] = dctx_i . v_j ; dv_j += A[i][j] * dctx_i
            let mut da = vec![0.0; t];
            for j in 0..t {
                let a = w_head[i * t + j];
                if a != 0.0 {
                    let vj = &cache.v[j * d + off..j * d + off + dh];
                    da[j] = dctx_i.iter().zip(vj).map(|(x1, x2)| x1 * x2).sum();
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (dd, cc) in dvj.iter_mut().zip(dctx_i) {
                        *dd += a * cc;
                    }
                }
            }
            // through the softmax row
            let arow = &w_head[i * t..(i + 1) * t];
            let dot: f64 = arow.iter().zip(&da).map(|(a, b)| a * b).sum();
            for j in 0..t {
                let a = arow[j];
                if a == 0.0 {
                    continue;
                }
                let dl = a * (da[j] - dot) * scale;
                let kj = &cache.k[j * d + off..j * d + off + dh];
                let qi = &cache.q[i * d + off..i * d + off + dh];
                let dqi = &mut dq[i * d + off..i * d + off + dh];
                for (dd, kk) in dqi.iter_mut().zip(kj) {
                    *dd += dl * kk;
                }
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                for (dd, qq) in dkj.iter_mut().zip(qi) {
                    *dd += dl * qq;
                }
            }
        }
    }

    // projections: q = x W_q + b_q etc.
    let mut dx = vec![0.0; t * d];
    for (dmat, w, gw, gb) in [
        (&dq, p.w_q, &mut grads.w_q, &mut grads.b_q),
        (&dk, p.w_k, &mut grads.w_k, &mut grads.b_k),
        (&dv, p.w_v, &mut grads.w_v, &mut grads.b_v),
    ] {
        let dxp = matmul_nt(dmat, w, t, d, d);
        for (a, b) in dx.iter_mut().zip(&dxp) {
            *a += b;
        }
        let dw = matmul_tn(x.data(), dmat, d, t, d);
        for (g, v) in gw.iter_mut().zip(&dw) {
            *g += v;
        }
        for row in 0..t {
            for j in 0..d {
                gb[j] += dmat[row * d + j];
            }
        }
    }

    Tensor::matrix(t, d, dx).expect("dx shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = 4 * (d * d + d);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn views(v: &[f64], d: usize) -> MhsaParams<'_> {
        let mut o = 0;
        let mut take = |n: usize| {
            let s = &v[o..o + n];
            o += n;
            s
        };
        MhsaParams {
            w_q: take(d * d),
            b_q: take(d),
            w_k: take(d * d),
            b_k: take(d),
            w_v: take(d * d),
            b_v: take(d),
            w_o: take(d * d),
            b_o: take(d),
        }
    }

    #[test]
    fn single_timestep_passes_value_through() {
        let dims = AttentionDims {
            n_heads: 2,
            d_head: 3,
        };
        let d = dims.d_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pv = random_params(d, &mut rng);
        let p = views(&pv, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xt = Tensor::matrix(1, d, x.clone()).unwrap();
        let (y, _) = mhsa_forward(&xt, &p, &[true], dims).unwrap();

        // with one position the attention weight is 1, so y = (xWv+bv)Wo + bo
        let v = super::project(&x, p.w_v, p.b_v, 1, d);
        let want = super::project(&v, p.w_o, p.b_o, 1, d);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let dims = AttentionDims {
            n_heads: 2,
            d_head: 2,
        };
        let d = dims.d_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pv = random_params(d, &mut rng);
        let p = views(&pv, d);
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = 4;
        let mut data = Vec::new();
        for _ in 0..t {
            data.extend_from_slice(&row);
        }
        let x = Tensor::matrix(t, d, data).unwrap();
        let (y, _) = mhsa_forward(&x, &p, &[true; 4], dims).unwrap();
        for r in 1..t {
            for j in 0..d {
                assert!((y.row(0)[j] - y.row(r)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_values_cannot_influence_output() {
        let dims = AttentionDims {
            n_heads: 1,
            d_head: 4,
        };
        let d = dims.d_model();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pv = random_params(d, &mut rng);
        let p = views(&pv, d);
        let mut data: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = [true, false, true];
        let x1 = Tensor::matrix(3, d, data.clone()).unwrap();
        let (y1, _) = mhsa_forward(&x1, &p, &mask, dims).unwrap();
        // rewrite the masked row entirely
        for j in 0..d {
            data[d + j] = 1e6 + j as f64;
        }
        let x2 = Tensor::matrix(3, d, data).unwrap();
        let (y2, _) = mhsa_forward(&x2, &p, &mask, dims).unwrap();
        for (a, b) in y1.row(0).iter().zip(y2.row(0)) {
            assert_eq!(a, b);
        }
        for (a, b) in y1.row(2).iter().zip(y2.row(2)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let dims = AttentionDims {
            n_heads: 1,
            d_head: 2,
        };
        let d = dims.d_model();
        let pv = vec![0.0; 4 * (d * d + d)];
        let p = views(&pv, d);
        let x = Tensor::matrix(2, d, vec![0.0; 2 * d]).unwrap();
        assert!(matches!(
            mhsa_forward(&x, &p, &[false, false], dims),
            Err(NumError::AllMasked)
        ));
    }
}
