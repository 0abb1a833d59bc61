//! The acoustics-only student: frame splicing with 3x subsampling, a stack
//! of post-norm self-attention encoder layers, learned-query attention
//! pooling, and a two-way softmax head.

use crate::corpus::{CorpusError, FeatureSequence};
use crate::numkit::{
    dropout_mask, layer_norm, layer_norm_backward, linear, linear_backward, masked_softmax,
    matmul_nn, matmul_nt, matmul_tn, mhsa_backward, mhsa_forward, relu, relu_backward, softmax,
    softmax_backward, AttentionDims, LayerNormCache, MhsaCache, MhsaGrads, MhsaParams, NumError,
    Tensor,
};
use crate::params::{uniform_init, ParamLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AftmError {
    #[error("features rejected: {0}")]
    Features(#[from] CorpusError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("parameter vector has {got} entries, model needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AftmConfig {
    pub d_feat: usize,
    pub splice: usize,
    pub subsample: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub use_positional: bool,
    pub layer_norm_eps: f64,
}

impl AftmConfig {
    /// Full-scale configuration (~4.9M parameters).
    pub fn paper() -> Self {
        Self {
            d_feat: 40,
            splice: 7,
            subsample: 3,
            n_layers: 6,
            n_heads: 4,
            d_head: 64,
            d_ff: 1024,
            dropout_rate: 0.1,
            use_positional: false,
            layer_norm_eps: 1e-5,
        }
    }

    /// Desk-scale configuration (~27k parameters), same topology.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_head: 16,
            d_ff: 64,
            ..Self::paper()
        }
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn spliced_dim(&self) -> usize {
        self.d_feat * self.splice
    }
}

impl Default for AftmConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Splices `splice` consecutive frames (symmetric context, edges
/// replicated) around every `subsample`-th frame starting at frame 0, so a
/// T x d_feat input becomes ceil(T / subsample) x (splice * d_feat).
pub fn splice_and_subsample(features: &FeatureSequence, config: &AftmConfig) -> Tensor {
    let t = features.n_frames();
    let d = features.n_dims();
    let half = config.splice / 2;
    let rows = t.div_ceil(config.subsample);
    let mut data = Vec::with_capacity(rows * config.splice * d);
    for r in 0..rows {
        let center = (r * config.subsample) as isize;
        for k in 0..config.splice as isize {
            let src = (center + k - half as isize).clamp(0, t as isize - 1) as usize;
            data.extend_from_slice(features.frame(src));
        }
    }
    Tensor::matrix(rows, config.splice * d, data).expect("constructive shape")
}

#[derive(Debug, Clone)]
pub struct Aftm {
    config: AftmConfig,
    layout: ParamLayout,
}

fn layer_seg(l: usize, name: &str) -> String {
    format!("layer{l}.{name}")
}

impl Aftm {
    pub fn new(config: AftmConfig) -> Self {
        let d = config.d_model();
        let mut layout = ParamLayout::new();
        layout.push("in_w", config.spliced_dim() * d);
        layout.push("in_b", d);
        for l in 0..config.n_layers {
            for p in ["w_q", "w_k", "w_v", "w_o"] {
                layout.push(&layer_seg(l, p), d * d);
                layout.push(&layer_seg(l, &p.replace('w', "b")), d);
            }
            layout.push(&layer_seg(l, "ln1_g"), d);
            layout.push(&layer_seg(l, "ln1_b"), d);
            layout.push(&layer_seg(l, "ff_w1"), d * config.d_ff);
            layout.push(&layer_seg(l, "ff_b1"), config.d_ff);
            layout.push(&layer_seg(l, "ff_w2"), config.d_ff * d);
            layout.push(&layer_seg(l, "ff_b2"), d);
            layout.push(&layer_seg(l, "ln2_g"), d);
            layout.push(&layer_seg(l, "ln2_b"), d);
        }
        layout.push("pool_q", d);
        layout.push("pool_w", d * d);
        layout.push("pool_b", d);
        layout.push("out_w", d * 2);
        layout.push("out_b", 2);
        Self { config, layout }
    }

    pub fn config(&self) -> &AftmConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    /// Closed-form parameter count.
    pub fn param_count_formula(config: &AftmConfig) -> usize {
        let d = config.d_model();
        let ff = config.d_ff;
        let per_layer = 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d;
        (config.spliced_dim() * d + d)
            + config.n_layers * per_layer
            + (d + d * d + d)
            + (d * 2 + 2)
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.layout.total()];
        let d = self.config.d_model();
        uniform_init(
            self.layout.slice_mut(&mut params, "in_w"),
            self.config.spliced_dim(),
            &mut rng,
        );
        for l in 0..self.config.n_layers {
            for p in ["w_q", "w_k", "w_v", "w_o"] {
                uniform_init(
                    self.layout.slice_mut(&mut params, &layer_seg(l, p)),
                    d,
                    &mut rng,
                );
            }
            self.layout
                .slice_mut(&mut params, &layer_seg(l, "ln1_g"))
                .fill(1.0);
            self.layout
                .slice_mut(&mut params, &layer_seg(l, "ln2_g"))
                .fill(1.0);
            uniform_init(
                self.layout.slice_mut(&mut params, &layer_seg(l, "ff_w1")),
                d,
                &mut rng,
            );
            uniform_init(
                self.layout.slice_mut(&mut params, &layer_seg(l, "ff_w2")),
                self.config.d_ff,
                &mut rng,
            );
        }
        uniform_init(self.layout.slice_mut(&mut params, "pool_q"), d, &mut rng);
        uniform_init(self.layout.slice_mut(&mut params, "pool_w"), d, &mut rng);
        uniform_init(self.layout.slice_mut(&mut params, "out_w"), d, &mut rng);
        params
    }

    fn check_params(&self, params: &[f64]) -> Result<(), AftmError> {
        if params.len() != self.layout.total() {
            return Err(AftmError::ParamCount {
                expected: self.layout.total(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn mhsa_views<'a>(&self, params: &'a [f64], l: usize) -> MhsaParams<'a> {
        MhsaParams {
            w_q: self.layout.slice(params, &layer_seg(l, "w_q")),
            b_q: self.layout.slice(params, &layer_seg(l, "b_q")),
            w_k: self.layout.slice(params, &layer_seg(l, "w_k")),
            b_k: self.layout.slice(params, &layer_seg(l, "b_k")),
            w_v: self.layout.slice(params, &layer_seg(l, "w_v")),
            b_v: self.layout.slice(params, &layer_seg(l, "b_v")),
            w_o: self.layout.slice(params, &layer_seg(l, "w_o")),
            b_o: self.layout.slice(params, &layer_seg(l, "b_o")),
        }
    }

    fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            n_heads: self.config.n_heads,
            d_head: self.config.d_head,
        }
    }

    /// Forward from an already-spliced input. `dropout` carries the rate
    /// and a seeded RNG during training; pass None for inference.
    pub fn forward_spliced(
        &self,
        x: &Tensor,
        mask: &[bool],
        params: &[f64],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, AftmCache), AftmError> {
        self.check_params(params)?;
        let d = self.config.d_model();
        let t = x.rows();
        if x.cols() != self.config.spliced_dim() {
            return Err(AftmError::Num(NumError::ShapeMismatch {
                op: "aftm_forward",
                expected: vec![t, self.config.spliced_dim()],
                got: x.shape().to_vec(),
            }));
        }
        if !mask.iter().any(|m| *m) {
            return Err(AftmError::Num(NumError::AllMasked));
        }

        let mut cache = AftmCache {
            spliced: x.clone(),
            ..Default::default()
        };

        // input projection
        let mut h = {
            let w = self.layout.slice(params, "in_w");
            let b = self.layout.slice(params, "in_b");
            let mut data = matmul_nn(x.data(), w, t, self.config.spliced_dim(), d);
            for r in 0..t {
                for j in 0..d {
                    data[r * d + j] += b[j];
                }
            }
            Tensor::matrix(t, d, data)?
        };

        for l in 0..self.config.n_layers {
            let attn_in = h.clone();
            let (attn_out, mhsa_cache) =
                mhsa_forward(&attn_in, &self.mhsa_views(params, l), mask, self.attention_dims())?;
            let drop1 = self.sample_dropout(t * d, &mut dropout);
            let mut after_attn = Vec::with_capacity(t * d);
            for i in 0..t * d {
                let a = attn_out.data()[i] * drop1.as_ref().map_or(1.0, |m| m[i]);
                after_attn.push(attn_in.data()[i] + a);
            }
            let ln1_g = self.layout.slice(params, &layer_seg(l, "ln1_g"));
            let ln1_b = self.layout.slice(params, &layer_seg(l, "ln1_b"));
            let mut ln1_caches = Vec::with_capacity(t);
            let mut normed1 = Vec::with_capacity(t * d);
            for r in 0..t {
                let (row, c) = layer_norm(
                    &after_attn[r * d..(r + 1) * d],
                    ln1_g,
                    ln1_b,
                    self.config.layer_norm_eps,
                )?;
                normed1.extend_from_slice(&row);
                ln1_caches.push(c);
            }
            let ff_in = Tensor::matrix(t, d, normed1)?;

            // position-wise feed-forward
            let w1 = self.layout.slice(params, &layer_seg(l, "ff_w1"));
            let b1 = self.layout.slice(params, &layer_seg(l, "ff_b1"));
            let w2 = self.layout.slice(params, &layer_seg(l, "ff_w2"));
            let b2 = self.layout.slice(params, &layer_seg(l, "ff_b2"));
            let ff = self.config.d_ff;
            let mut pre1 = matmul_nn(ff_in.data(), w1, t, d, ff);
            for r in 0..t {
                for j in 0..ff {
                    pre1[r * ff + j] += b1[j];
                }
            }
            let hidden = relu(&pre1);
            let mut ff_out = matmul_nn(&hidden, w2, t, ff, d);
            for r in 0..t {
                for j in 0..d {
                    ff_out[r * d + j] += b2[j];
                }
            }
            let drop2 = self.sample_dropout(t * d, &mut dropout);
            let mut after_ff = Vec::with_capacity(t * d);
            for i in 0..t * d {
                let f = ff_out[i] * drop2.as_ref().map_or(1.0, |m| m[i]);
                after_ff.push(ff_in.data()[i] + f);
            }
            let ln2_g = self.layout.slice(params, &layer_seg(l, "ln2_g"));
            let ln2_b = self.layout.slice(params, &layer_seg(l, "ln2_b"));
            let mut ln2_caches = Vec::with_capacity(t);
            let mut normed2 = Vec::with_capacity(t * d);
            for r in 0..t {
                let (row, c) = layer_norm(
                    &after_ff[r * d..(r + 1) * d],
                    ln2_g,
                    ln2_b,
                    self.config.layer_norm_eps,
                )?;
                normed2.extend_from_slice(&row);
                ln2_caches.push(c);
            }
            h = Tensor::matrix(t, d, normed2)?;

            cache.layers.push(LayerCache {
                attn_in,
                mhsa: mhsa_cache,
                drop1,
                ln1: ln1_caches,
                ff_in,
                pre1,
                hidden,
                drop2,
                ln2: ln2_caches,
            });
        }

        // learned-query attention pooling over valid rows
        let pool_q = self.layout.slice(params, "pool_q");
        let logits: Vec<f64> = (0..t)
            .map(|r| h.row(r).iter().zip(pool_q).map(|(a, b)| a * b).sum())
            .collect();
        let weights = masked_softmax(&logits, mask)?;
        let mut ctx = vec![0.0; d];
        for r in 0..t {
            if weights[r] != 0.0 {
                for (c, v) in ctx.iter_mut().zip(h.row(r)) {
                    *c += weights[r] * v;
                }
            }
        }
        let pool_w = self.layout.slice(params, "pool_w");
        let pool_b = self.layout.slice(params, "pool_b");
        let pre_emb = linear(&ctx, pool_w, pool_b, d, d);
        let embedding: Vec<f64> = pre_emb.iter().map(|v| v.tanh()).collect();

        let out_w = self.layout.slice(params, "out_w");
        let out_b = self.layout.slice(params, "out_b");
        let logits2 = linear(&embedding, out_w, out_b, d, 2);
        let probs = softmax(&logits2)?;

        cache.encoded = h;
        cache.pool_weights = weights;
        cache.ctx = ctx;
        cache.embedding = embedding;
        cache.probs = probs.clone();
        Ok((probs[1], cache))
    }

    fn sample_dropout(
        &self,
        len: usize,
        dropout: &mut Option<(f64, &mut ChaCha8Rng)>,
    ) -> Option<Vec<f64>> {
        match dropout {
            Some((rate, rng)) if *rate > 0.0 => Some(dropout_mask(len, *rate, *rng)),
            _ => None,
        }
    }

    /// Probability of device-directedness for a full feature sequence.
    pub fn score(&self, features: &FeatureSequence, params: &[f64]) -> Result<f64, AftmError> {
        features.validate()?;
        let x = splice_and_subsample(features, &self.config);
        let mask = vec![true; x.rows()];
        self.forward_spliced(&x, &mask, params, None)
            .map(|(score, _)| score)
    }

    pub fn forward(
        &self,
        features: &FeatureSequence,
        params: &[f64],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, AftmCache), AftmError> {
        features.validate()?;
        let x = splice_and_subsample(features, &self.config);
        let mask = vec![true; x.rows()];
        self.forward_spliced(&x, &mask, params, dropout)
    }

    /// Pooled utterance embedding (256-D at the full-scale config).
    pub fn embed(
        &self,
        features: &FeatureSequence,
        params: &[f64],
    ) -> Result<Vec<f64>, AftmError> {
        self.forward(features, params, None)
            .map(|(_, cache)| cache.embedding)
    }

    /// Backward pass. `dscore` is the upstream gradient on the probability;
    /// `dembedding` optionally injects a gradient directly on the pooled
    /// embedding (used by embedding-level distillation). Returns gradients
    /// for all parameters and for the spliced input.
    pub fn backward_spliced(
        &self,
        params: &[f64],
        cache: &AftmCache,
        dscore: f64,
        dembedding: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Tensor), AftmError> {
        self.check_params(params)?;
        let d = self.config.d_model();
        let t = cache.spliced.rows();
        let mut grads = vec![0.0; self.layout.total()];

        // head
        let dlogits = softmax_backward(&cache.probs, &[0.0, dscore]);
        let mut demb = vec![0.0; d];
        {
            let (wr, br) = (self.layout.range("out_w"), self.layout.range("out_b"));
            let out_w = self.layout.slice(params, "out_w");
            let (left, right) = grads.split_at_mut(br.start);
            demb = linear_backward(
                &cache.embedding,
                out_w,
                &dlogits,
                d,
                2,
                &mut left[wr],
                right,
            );
        }
        if let Some(extra) = dembedding {
            for (a, b) in demb.iter_mut().zip(extra) {
                *a += b;
            }
        }

        // tanh projection on the pooled context
        let dpre: Vec<f64> = demb
            .iter()
            .zip(&cache.embedding)
            .map(|(g, e)| g * (1.0 - e * e))
            .collect();
        let mut dctx = vec![0.0; d];
        {
            let (wr, br) = (self.layout.range("pool_w"), self.layout.range("pool_b"));
            let pool_w = self.layout.slice(params, "pool_w");
            let (left, right) = grads.split_at_mut(br.start);
            dctx = linear_backward(
                &cache.ctx,
                pool_w,
                &dpre,
                d,
                d,
                &mut left[wr],
                &mut right[..d],
            );
        }

        // pooling: ctx = sum_t w_t h_t, w = masked_softmax(q . h_t)
        let h = &cache.encoded;
        let w = &cache.pool_weights;
        let pool_q = self.layout.slice(params, "pool_q");
        let mut dh = vec![0.0; t * d];
        let mut dlogits_pool = vec![0.0; t];
        for r in 0..t {
            if w[r] != 0.0 {
                for j in 0..d {
                    dh[r * d + j] += w[r] * dctx[j];
                }
                dlogits_pool[r] = h.row(r).iter().zip(&dctx).map(|(a, b)| a * b).sum();
            }
        }
        let du = softmax_backward(w, &dlogits_pool);
        {
            let gq = self.layout.slice_mut(&mut grads, "pool_q");
            for r in 0..t {
                if du[r] != 0.0 {
                    for j in 0..d {
                        gq[j] += du[r] * h.row(r)[j];
                        dh[r * d + j] += du[r] * pool_q[j];
                    }
                }
            }
        }

        // encoder layers in reverse
        let ff = self.config.d_ff;
        for l in (0..self.config.n_layers).rev() {
            let lc = &cache.layers[l];
            let ln2_g = self.layout.slice(params, &layer_seg(l, "ln2_g"));
            let mut d_after_ff = vec![0.0; t * d];
            {
                let g2r = self.layout.range(&layer_seg(l, "ln2_g"));
                let b2r = self.layout.range(&layer_seg(l, "ln2_b"));
                for r in 0..t {
                    let (dx, dg, db) =
                        layer_norm_backward(&lc.ln2[r], ln2_g, &dh[r * d..(r + 1) * d]);
                    d_after_ff[r * d..(r + 1) * d].copy_from_slice(&dx);
                    for j in 0..d {
                        grads[g2r.start + j] += dg[j];
                        grads[b2r.start + j] += db[j];
                    }
                }
            }
            // after_ff = ff_in + dropout(ff_out)
            let mut d_ff_out = d_after_ff.clone();
            if let Some(m) = &lc.drop2 {
                for (g, mm) in d_ff_out.iter_mut().zip(m) {
                    *g *= mm;
                }
            }
            let mut d_ff_in = d_after_ff;

            let w2 = self.layout.slice(params, &layer_seg(l, "ff_w2"));
            let d_hidden = matmul_nt(&d_ff_out, w2, t, d, ff);
            {
                let w2g = self.layout.range(&layer_seg(l, "ff_w2"));
                let dw2 = matmul_tn(&lc.hidden, &d_ff_out, ff, t, d);
                for (g, v) in grads[w2g].iter_mut().zip(&dw2) {
                    *g += v;
                }
                let b2g = self.layout.range(&layer_seg(l, "ff_b2"));
                for r in 0..t {
                    for j in 0..d {
                        grads[b2g.start + j] += d_ff_out[r * d + j];
                    }
                }
            }
            let d_pre1 = relu_backward(&lc.pre1, &d_hidden);
            let w1 = self.layout.slice(params, &layer_seg(l, "ff_w1"));
            {
                let w1g = self.layout.range(&layer_seg(l, "ff_w1"));
                let dw1 = matmul_tn(lc.ff_in.data(), &d_pre1, d, t, ff);
                for (g, v) in grads[w1g].iter_mut().zip(&dw1) {
                    *g += v;
                }
                let b1g = self.layout.range(&layer_seg(l, "ff_b1"));
                for r in 0..t {
                    for j in 0..ff {
                        grads[b1g.start + j] += d_pre1[r * ff + j];
                    }
                }
            }
            let dx_ff = matmul_nt(&d_pre1, w1, t, ff, d);
            for (a, b) in d_ff_in.iter_mut().zip(&dx_ff) {
                *a += b;
            }

            // ln1 rows
            let ln1_g = self.layout.slice(params, &layer_seg(l, "ln1_g"));
            let mut d_after_attn = vec![0.0; t * d];
            {
                let g1r = self.layout.range(&layer_seg(l, "ln1_g"));
                let b1r = self.layout.range(&layer_seg(l, "ln1_b"));
                for r in 0..t {
                    let (dx, dg, db) =
                        layer_norm_backward(&lc.ln1[r], ln1_g, &d_ff_in[r * d..(r + 1) * d]);
                    d_after_attn[r * d..(r + 1) * d].copy_from_slice(&dx);
                    for j in 0..d {
                        grads[g1r.start + j] += dg[j];
                        grads[b1r.start + j] += db[j];
                    }
                }
            }
            // after_attn = attn_in + dropout(attn_out)
            let mut d_attn_out = d_after_attn.clone();
            if let Some(m) = &lc.drop1 {
                for (g, mm) in d_attn_out.iter_mut().zip(m) {
                    *g *= mm;
                }
            }
            let mut mhsa_grads = MhsaGrads::zeros(d);
            let d_attn_out_t = Tensor::matrix(t, d, d_attn_out)?;
            let dx_attn = mhsa_backward(
                &lc.attn_in,
                &self.mhsa_views(params, l),
                &lc.mhsa,
                &d_attn_out_t,
                self.attention_dims(),
                &mut mhsa_grads,
            );
            for (seg, src) in [
                ("w_q", &mhsa_grads.w_q),
                ("b_q", &mhsa_grads.b_q),
                ("w_k", &mhsa_grads.w_k),
                ("b_k", &mhsa_grads.b_k),
                ("w_v", &mhsa_grads.w_v),
                ("b_v", &mhsa_grads.b_v),
                ("w_o", &mhsa_grads.w_o),
                ("b_o", &mhsa_grads.b_o),
            ] {
                let r = self.layout.range(&layer_seg(l, seg));
                for (g, v) in grads[r].iter_mut().zip(src) {
                    *g += v;
                }
            }
            // residual: dh for the previous layer = d_after_attn + dx_attn
            for i in 0..t * d {
                dh[i] = d_after_attn[i] + dx_attn.data()[i];
            }
        }

        // input projection
        let in_w = self.layout.slice(params, "in_w");
        let sd = self.config.spliced_dim();
        let dx = matmul_nt(&dh, in_w, t, d, sd);
        {
            let wr = self.layout.range("in_w");
            let dw = matmul_tn(cache.spliced.data(), &dh, sd, t, d);
            for (g, v) in grads[wr].iter_mut().zip(&dw) {
                *g += v;
            }
            let br = self.layout.range("in_b");
            for r in 0..t {
                for j in 0..d {
                    grads[br.start + j] += dh[r * d + j];
                }
            }
        }

        Ok((grads, Tensor::matrix(t, sd, dx)?))
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    attn_in: Tensor,
    mhsa: MhsaCache,
    drop1: Option<Vec<f64>>,
    ln1: Vec<LayerNormCache>,
    ff_in: Tensor,
    pre1: Vec<f64>,
    hidden: Vec<f64>,
    drop2: Option<Vec<f64>>,
    ln2: Vec<LayerNormCache>,
}

#[derive(Debug, Clone)]
pub struct AftmCache {
    spliced: Tensor,
    layers: Vec<LayerCache>,
    encoded: Tensor,
    pool_weights: Vec<f64>,
    ctx: Vec<f64>,
    embedding: Vec<f64>,
    probs: Vec<f64>,
}

impl Default for AftmCache {
    fn default() -> Self {
        Self {
            spliced: Tensor::zeros(vec![0, 0]),
            layers: Vec::new(),
            encoded: Tensor::zeros(vec![0, 0]),
            pool_weights: Vec::new(),
            ctx: Vec::new(),
            embedding: Vec::new(),
            probs: Vec::new(),
        }
    }
}

impl AftmCache {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_features, AcousticParams, ClassLabel};
    use crate::numkit::finite_difference_check;
    use rand::Rng;

    fn features(t: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth_features(
            ClassLabel::Intended,
            15.0,
            t,
            &AcousticParams::default(),
            &mut rng,
        )
    }

    #[test]
    fn single_frame_is_replicated_across_the_window() {
        let f = features(1, 0);
        let x = splice_and_subsample(&f, &AftmConfig::paper());
        assert_eq!(x.shape(), &[1, 280]);
        for k in 0..7 {
            assert_eq!(&x.row(0)[k * 40..(k + 1) * 40], f.frame(0));
        }
    }

    #[test]
    fn window_centers_follow_the_subsample_grid() {
        // ramp input tags every frame, so the center slice identifies the
        // frame it came from
        let t = 7;
        let mut data = vec![0.0; t * 40];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i / 40) as f64;
        }
        let f = FeatureSequence::new(t, 40, data).unwrap();
        let x = splice_and_subsample(&f, &AftmConfig::paper());
        assert_eq!(x.rows(), 3);
        // row r is centered on frame 3r; positions 120..160 hold the center
        for r in 0..3 {
            assert_eq!(x.row(r)[120], (3 * r) as f64);
        }
        // row 1's center slice is frame 3
        assert_eq!(&x.row(1)[120..160], f.frame(3));
    }

    #[test]
    fn shape_law_holds_for_all_small_lengths() {
        let config = AftmConfig::paper();
        for t in 1..=30 {
            let f = features(t, t as u64);
            let x = splice_and_subsample(&f, &config);
            assert_eq!(x.cols(), 280);
            assert_eq!(x.rows(), t.div_ceil(3), "t = {t}");
        }
    }

    #[test]
    fn paper_param_count_is_in_band() {
        let n = Aftm::param_count_formula(&AftmConfig::paper());
        assert!(
            (4_300_000..=5_300_000).contains(&n),
            "paper-scale param count {n}"
        );
    }

    #[test]
    fn tiny_param_count_under_100k() {
        let model = Aftm::new(AftmConfig::tiny());
        assert!(model.param_count() < 100_000, "{}", model.param_count());
        assert_eq!(
            model.param_count(),
            Aftm::param_count_formula(&AftmConfig::tiny())
        );
    }

    #[test]
    fn embedding_dim_matches_config() {
        let config = AftmConfig {
            n_layers: 1,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            ..AftmConfig::paper()
        };
        let model = Aftm::new(config);
        let params = model.init_params(4);
        let emb = model.embed(&features(5, 2), &params).unwrap();
        assert_eq!(emb.len(), 8);
    }

    #[test]
    fn score_is_probability_and_deterministic() {
        let model = Aftm::new(AftmConfig::tiny());
        let params = model.init_params(7);
        let f = features(9, 5);
        let a = model.score(&f, &params).unwrap();
        let b = model.score(&f, &params).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
        let (_, cache) = model.forward(&f, &params, None).unwrap();
        assert!((cache.probs[0] + cache.probs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn appending_masked_padding_leaves_score_unchanged() {
        let config = AftmConfig::tiny();
        let model = Aftm::new(config);
        let params = model.init_params(11);
        let f = features(12, 3);
        let x = splice_and_subsample(&f, &config);
        let t = x.rows();
        let (base, _) = model
            .forward_spliced(&x, &vec![true; t], &params, None)
            .unwrap();

        let mut padded = x.data().to_vec();
        padded.extend(std::iter::repeat_n(3.25, 2 * x.cols()));
        let xp = Tensor::matrix(t + 2, x.cols(), padded).unwrap();
        let mut mask = vec![true; t];
        mask.extend([false, false]);
        let (with_pad, cache) = model.forward_spliced(&xp, &mask, &params, None).unwrap();
        assert!(
            (base - with_pad).abs() < 1e-6,
            "{base} vs {with_pad}"
        );
        assert_eq!(cache.pool_weights[t], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences_on_params_and_input() {
        let config = AftmConfig {
            n_layers: 1,
            n_heads: 2,
            d_head: 3,
            d_ff: 8,
            d_feat: 4,
            splice: 3,
            subsample: 3,
            ..AftmConfig::paper()
        };
        let model = Aftm::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for trial in 0..10 {
            let t = 3;
            let data: Vec<f64> = (0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = FeatureSequence::new(t, 4, data).unwrap();
            let params = model.init_params(200 + trial);
            let (_, cache) = model.forward(&f, &params, None).unwrap();
            let (grads, dx) = model.backward_spliced(&params, &cache, 1.0, None).unwrap();

            let err = finite_difference_check(
                |p| model.score(&f, p).unwrap(),
                &params,
                &grads,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: param rel err {err}");

            // input gradient, checked through the spliced view
            let x = splice_and_subsample(&f, model.config());
            let mask = vec![true; x.rows()];
            let err_x = finite_difference_check(
                |xd| {
                    let xt = Tensor::matrix(x.rows(), x.cols(), xd.to_vec()).unwrap();
                    model
                        .forward_spliced(&xt, &mask, &params, None)
                        .unwrap()
                        .0
                },
                x.data(),
                dx.data(),
                1e-5,
            )
            .unwrap();
            assert!(err_x < 1e-4, "trial {trial}: input rel err {err_x}");
        }
    }

    #[test]
    fn dropout_zero_forward_is_bit_identical_to_inference() {
        let model = Aftm::new(AftmConfig::tiny());
        let params = model.init_params(1);
        let f = features(8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = model.forward(&f, &params, Some((0.0, &mut rng))).unwrap();
        let (b, _) = model.forward(&f, &params, None).unwrap();
        assert_eq!(a, b);
    }
}
