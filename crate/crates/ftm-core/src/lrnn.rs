//! The lattice teacher: a GRU run over the lattice DAG in topological
//! order, posterior-weighted pooling at every node, a 16-D embedding at the
//! end node, and a two-way softmax head on top.

use crate::corpus::{CorpusError, Lattice};
use crate::numkit::{
    gru_backward, gru_step_with_cache, linear, linear_backward, softmax, softmax_backward,
    GruCache, GruDims, GruGrads, GruParams, NumError,
};
use crate::params::{uniform_init, ParamLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LrnnError {
    #[error("lattice rejected: {0}")]
    Lattice(#[from] CorpusError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("parameter vector has {got} entries, model needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LrnnConfig {
    pub word_embedding_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub arc_scalar_features: usize,
}

impl Default for LrnnConfig {
    fn default() -> Self {
        // ~4.6k parameters, the teacher's published scale
        Self {
            word_embedding_dim: 32,
            hidden_dim: 16,
            vocab_size: 64,
            arc_scalar_features: 3,
        }
    }
}

impl LrnnConfig {
    pub fn arc_input_dim(&self) -> usize {
        self.word_embedding_dim + self.arc_scalar_features
    }
}

/// The model: a config plus the segment layout over its flat parameters.
#[derive(Debug, Clone)]
pub struct Lrnn {
    config: LrnnConfig,
    layout: ParamLayout,
}

const GRU_SEGMENTS: [&str; 9] = [
    "gru.w_z", "gru.u_z", "gru.b_z", "gru.w_r", "gru.u_r", "gru.b_r", "gru.w_h", "gru.u_h",
    "gru.b_h",
];

impl Lrnn {
    pub fn new(config: LrnnConfig) -> Self {
        let mut layout = ParamLayout::new();
        let h = config.hidden_dim;
        let input = config.arc_input_dim();
        layout.push("embedding", config.vocab_size * config.word_embedding_dim);
        for name in GRU_SEGMENTS {
            let len = if name.ends_with("b_z") || name.ends_with("b_r") || name.ends_with("b_h") {
                h
            } else if name.contains(".u_") {
                h * h
            } else {
                h * input
            };
            layout.push(name, len);
        }
        layout.push("out_w", h * 2);
        layout.push("out_b", 2);
        Self { config, layout }
    }

    pub fn config(&self) -> &LrnnConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    /// Closed-form count, kept separate from the layout as a consistency
    /// check.
    pub fn param_count_formula(config: &LrnnConfig) -> usize {
        let h = config.hidden_dim;
        let input = config.arc_input_dim();
        config.vocab_size * config.word_embedding_dim + 3 * (h * input + h * h + h) + h * 2 + 2
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.layout.total()];
        let input = self.config.arc_input_dim();
        let h = self.config.hidden_dim;
        uniform_init(
            self.layout.slice_mut(&mut params, "embedding"),
            self.config.word_embedding_dim,
            &mut rng,
        );
        for name in GRU_SEGMENTS {
            if name.contains(".b_") {
                continue; // biases start at zero
            }
            let fan_in = if name.contains(".u_") { h } else { input };
            uniform_init(self.layout.slice_mut(&mut params, name), fan_in, &mut rng);
        }
        uniform_init(self.layout.slice_mut(&mut params, "out_w"), h, &mut rng);
        params
    }

    fn gru_views<'a>(&self, params: &'a [f64]) -> GruParams<'a> {
        GruParams {
            w_z: self.layout.slice(params, "gru.w_z"),
            u_z: self.layout.slice(params, "gru.u_z"),
            b_z: self.layout.slice(params, "gru.b_z"),
            w_r: self.layout.slice(params, "gru.w_r"),
            u_r: self.layout.slice(params, "gru.u_r"),
            b_r: self.layout.slice(params, "gru.b_r"),
            w_h: self.layout.slice(params, "gru.w_h"),
            u_h: self.layout.slice(params, "gru.u_h"),
            b_h: self.layout.slice(params, "gru.b_h"),
        }
    }

    fn dims(&self) -> GruDims {
        GruDims {
            input: self.config.arc_input_dim(),
            hidden: self.config.hidden_dim,
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<(), LrnnError> {
        if params.len() != self.layout.total() {
            return Err(LrnnError::ParamCount {
                expected: self.layout.total(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn arc_feature(&self, params: &[f64], arc: &crate::corpus::LatticeArc) -> Vec<f64> {
        let e = self.config.word_embedding_dim;
        let emb = self.layout.slice(params, "embedding");
        let word = arc.word_id as usize % self.config.vocab_size;
        let mut x = Vec::with_capacity(self.config.arc_input_dim());
        x.extend_from_slice(&emb[word * e..(word + 1) * e]);
        x.push(arc.posterior);
        x.push(arc.am_score);
        x.push(arc.lm_score);
        x
    }

    /// Incoming arcs per node, in an order determined only by arc content
    /// (ids enter last, as tie-breaks), so arc storage order never affects
    /// the result.
    fn incoming(&self, lattice: &Lattice) -> Vec<Vec<usize>> {
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); lattice.node_count];
        for (i, arc) in lattice.arcs.iter().enumerate() {
            incoming[arc.dst].push(i);
        }
        for list in incoming.iter_mut() {
            list.sort_by(|&a, &b| {
                let (x, y) = (&lattice.arcs[a], &lattice.arcs[b]);
                (
                    x.word_id,
                    x.posterior.to_bits(),
                    x.am_score.to_bits(),
                    x.lm_score.to_bits(),
                    x.src,
                    x.dst,
                )
                    .cmp(&(
                        y.word_id,
                        y.posterior.to_bits(),
                        y.am_score.to_bits(),
                        y.lm_score.to_bits(),
                        y.src,
                        y.dst,
                    ))
            });
        }
        incoming
    }

    fn embed_impl(
        &self,
        lattice: &Lattice,
        params: &[f64],
        mut cache: Option<&mut LrnnCache>,
    ) -> Result<Vec<f64>, LrnnError> {
        self.check_params(params)?;
        lattice.validate()?;
        let h = self.config.hidden_dim;
        let gru = self.gru_views(params);
        let dims = self.dims();
        let incoming = self.incoming(lattice);

        let mut states: Vec<Vec<f64>> = vec![vec![0.0; h]; lattice.node_count];
        for v in 1..lattice.node_count {
            let weights = pooling_weights(lattice, &incoming[v]);
            let mut pooled = vec![0.0; h];
            for (&arc_idx, &w) in incoming[v].iter().zip(&weights) {
                let arc = &lattice.arcs[arc_idx];
                let x = self.arc_feature(params, arc);
                let (state, gru_cache) = gru_step_with_cache(&states[arc.src], &x, &gru, dims)?;
                for (p, s) in pooled.iter_mut().zip(&state) {
                    *p += w * s;
                }
                if let Some(c) = cache.as_deref_mut() {
                    c.steps.push(ArcStep {
                        arc_idx,
                        weight: w,
                        gru: gru_cache,
                    });
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.node_step_end.push(c.steps.len());
            }
            states[v] = pooled;
        }
        Ok(states.pop().expect("node_count >= 2"))
    }

    /// 16-D lattice embedding (at the default config).
    pub fn embed(&self, lattice: &Lattice, params: &[f64]) -> Result<Vec<f64>, LrnnError> {
        self.embed_impl(lattice, params, None)
    }

    /// Probability that the utterance behind `lattice` was device-directed.
    pub fn score(&self, lattice: &Lattice, params: &[f64]) -> Result<f64, LrnnError> {
        self.forward(lattice, params).map(|(score, _)| score)
    }

    pub fn forward(
        &self,
        lattice: &Lattice,
        params: &[f64],
    ) -> Result<(f64, LrnnCache), LrnnError> {
        let mut cache = LrnnCache::default();
        let emb = self.embed_impl(lattice, params, Some(&mut cache))?;
        let logits = linear(
            &emb,
            self.layout.slice(params, "out_w"),
            self.layout.slice(params, "out_b"),
            self.config.hidden_dim,
            2,
        );
        let probs = softmax(&logits)?;
        cache.embedding = emb;
        cache.probs = probs.clone();
        Ok((probs[1], cache))
    }

    /// Gradient of `dscore * score` w.r.t. all parameters.
    pub fn backward(
        &self,
        lattice: &Lattice,
        params: &[f64],
        cache: &LrnnCache,
        dscore: f64,
    ) -> Result<Vec<f64>, LrnnError> {
        self.check_params(params)?;
        let h = self.config.hidden_dim;
        let e = self.config.word_embedding_dim;
        let mut grads = vec![0.0; self.layout.total()];

        // head
        let dlogits = softmax_backward(&cache.probs, &[0.0, dscore]);
        let mut demb = vec![0.0; h];
        {
            let out_w = self.layout.slice(params, "out_w");
            let out_range = self.layout.range("out_w");
            let outb_range = self.layout.range("out_b");
            let (dw, db): (&mut [f64], &mut [f64]) = {
                // segments are disjoint; split to borrow both
                let (left, right) = grads.split_at_mut(outb_range.start);
                (&mut left[out_range.clone()], right)
            };
            demb = linear_backward(&cache.embedding, out_w, &dlogits, h, 2, dw, db);
        }

        // reverse DAG traversal
        let gru = self.gru_views(params);
        let dims = self.dims();
        let mut gru_grads = GruGrads::zeros(dims);
        let mut demb_table = vec![0.0; self.config.vocab_size * e];
        let mut dstates: Vec<Vec<f64>> = vec![vec![0.0; h]; lattice.node_count];
        dstates[lattice.node_count - 1] = demb;

        for v in (1..lattice.node_count).rev() {
            let seg_end = cache.node_step_end[v - 1];
            let seg_start = if v == 1 { 0 } else { cache.node_step_end[v - 2] };
            if dstates[v].iter().all(|d| *d == 0.0) {
                continue;
            }
            let dnode = dstates[v].clone();
            for step in &cache.steps[seg_start..seg_end] {
                let arc = &lattice.arcs[step.arc_idx];
                let dh_arc: Vec<f64> = dnode.iter().map(|d| d * step.weight).collect();
                let (dh_src, dx) = gru_backward(&step.gru, &gru, dims, &dh_arc, &mut gru_grads);
                for (a, b) in dstates[arc.src].iter_mut().zip(&dh_src) {
                    *a += b;
                }
                let word = arc.word_id as usize % self.config.vocab_size;
                for (t, dxi) in demb_table[word * e..(word + 1) * e].iter_mut().zip(&dx) {
                    *t += dxi;
                }
                // dx beyond the embedding belongs to posterior/am/lm data
            }
        }

        self.layout
            .slice_mut(&mut grads, "embedding")
            .copy_from_slice(&demb_table);
        for (name, src) in [
            ("gru.w_z", &gru_grads.w_z),
            ("gru.u_z", &gru_grads.u_z),
            ("gru.b_z", &gru_grads.b_z),
            ("gru.w_r", &gru_grads.w_r),
            ("gru.u_r", &gru_grads.u_r),
            ("gru.b_r", &gru_grads.b_r),
            ("gru.w_h", &gru_grads.w_h),
            ("gru.u_h", &gru_grads.u_h),
            ("gru.b_h", &gru_grads.b_h),
        ] {
            self.layout.slice_mut(&mut grads, name).copy_from_slice(src);
        }
        Ok(grads)
    }
}

/// Pooling weights over a node's incoming arcs: posteriors renormalized to
/// sum to one (uniform fallback when the incoming mass vanishes).
fn pooling_weights(lattice: &Lattice, incoming: &[usize]) -> Vec<f64> {
    let total: f64 = incoming.iter().map(|&i| lattice.arcs[i].posterior).sum();
    if total > 1e-12 {
        incoming
            .iter()
            .map(|&i| lattice.arcs[i].posterior / total)
            .collect()
    } else {
        vec![1.0 / incoming.len() as f64; incoming.len()]
    }
}

#[derive(Debug, Clone)]
struct ArcStep {
    arc_idx: usize,
    weight: f64,
    gru: GruCache,
}

#[derive(Debug, Clone, Default)]
pub struct LrnnCache {
    steps: Vec<ArcStep>,
    /// Prefix end of `steps` per non-start node, in node order.
    node_step_end: Vec<usize>,
    embedding: Vec<f64>,
    probs: Vec<f64>,
}

impl LrnnCache {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}
