//! Losses and the training loop.
//!
//! Both models train on weak labels with binary cross entropy. The
//! distilled student adds alpha times the symmetric instance-level KL
//! between its score and a frozen teacher score read from a file produced
//! beforehand; gradients never flow to the teacher.

use crate::aftm::{Aftm, AftmError};
use crate::corpus::{ClassLabel, UtteranceRecord, WeakLabel};
use crate::evalkit::{det_curve, eer};
use crate::lrnn::{Lrnn, LrnnError};
use crate::numkit::{adam_step, clip_global_norm, AdamHyper, AdamState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Lrnn(#[from] LrnnError),
    #[error(transparent)]
    Aftm(#[from] AftmError),
    #[error("record {id} has no usable weak label")]
    MissingWeakLabel { id: String },
    #[error("no teacher score for id {id}")]
    MissingTeacherScore { id: String },
    #[error("teacher scoring failed for ids: {ids:?}")]
    TeacherScoring { ids: Vec<String> },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (utterance {id})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        id: String,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::evalkit::EvalError),
    #[error(transparent)]
    Num(#[from] crate::numkit::NumError),
    #[error("teacher score io: {0}")]
    Io(#[from] std::io::Error),
    #[error("teacher score file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdHyper {
    pub alpha: f64,
    pub eps: f64,
    pub variant: KdVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KdVariant {
    ScoreKl,
    EmbeddingMse,
}

impl Default for KdHyper {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            eps: 1e-7,
            variant: KdVariant::ScoreKl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            clip_norm: 1.0,
            dropout_rate: 0.1,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// -[y log p + (1-y) log(1-p)] with p clamped to [eps, 1-eps].
pub fn bce_loss(p: f64, y: f64, eps: f64) -> f64 {
    let p = clamp(p, eps);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d bce / d p; zero where the clamp is active.
pub fn bce_loss_grad(p: f64, y: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        return 0.0;
    }
    let p = clamp(p, eps);
    -(y / p) + (1.0 - y) / (1.0 - p)
}

/// Symmetric KL between the Bernoulli distributions (p, 1-p) and
/// (q, 1-q), after clamping both scores. Zero iff the clamped scores are
/// equal.
pub fn sym_kl(p: f64, q: f64, eps: f64) -> f64 {
    let p = clamp(p, eps);
    let q = clamp(q, eps);
    let kl = |a: f64, b: f64| a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
    kl(p, q) + kl(q, p)
}

/// d sym_kl / d q (the student side); zero where the clamp is active.
pub fn sym_kl_grad_q(p: f64, q: f64, eps: f64) -> f64 {
    if q < eps || q > 1.0 - eps {
        return 0.0;
    }
    let p = clamp(p, eps);
    let q = clamp(q, eps);
    // d/dq [ p ln(p/q) + (1-p) ln((1-p)/(1-q)) + q ln(q/p) + (1-q) ln((1-q)/(1-p)) ]
    -p / q + (1.0 - p) / (1.0 - q) + (q / p).ln() - ((1.0 - q) / (1.0 - p)).ln()
}

/// Student loss with frozen-teacher regularization:
/// bce(p_student, y) + alpha * sym_kl(p_teacher, p_student).
pub fn kd_loss(p_student: f64, y_weak: f64, p_teacher: f64, hyper: &KdHyper) -> f64 {
    bce_loss(p_student, y_weak, hyper.eps) + hyper.alpha * sym_kl(p_teacher, p_student, hyper.eps)
}

pub fn kd_loss_grad(p_student: f64, y_weak: f64, p_teacher: f64, hyper: &KdHyper) -> f64 {
    bce_loss_grad(p_student, y_weak, hyper.eps)
        + hyper.alpha * sym_kl_grad_q(p_teacher, p_student, hyper.eps)
}

/// Mean squared difference between the teacher embedding and the student
/// embedding passed through `projection` (teacher_dim x student_dim,
/// row-major).
pub fn embed_mse_loss(
    student_embedding: &[f64],
    teacher_embedding: &[f64],
    projection: &[f64],
) -> Result<f64, TrainError> {
    let (sd, td) = (student_embedding.len(), teacher_embedding.len());
    if projection.len() != sd * td {
        return Err(TrainError::Num(crate::numkit::NumError::LengthMismatch {
            op: "embed_mse_loss",
            left: projection.len(),
            right: sd * td,
        }));
    }
    let mut total = 0.0;
    for i in 0..td {
        let proj: f64 = projection[i * sd..(i + 1) * sd]
            .iter()
            .zip(student_embedding)
            .map(|(w, e)| w * e)
            .sum();
        let diff = proj - teacher_embedding[i];
        total += diff * diff;
    }
    Ok(total / td as f64)
}

/// Gradients of `embed_mse_loss` w.r.t. the student embedding and the
/// projection.
pub fn embed_mse_loss_grad(
    student_embedding: &[f64],
    teacher_embedding: &[f64],
    projection: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let (sd, td) = (student_embedding.len(), teacher_embedding.len());
    if projection.len() != sd * td {
        return Err(TrainError::Num(crate::numkit::NumError::LengthMismatch {
            op: "embed_mse_loss",
            left: projection.len(),
            right: sd * td,
        }));
    }
    let mut d_emb = vec![0.0; sd];
    let mut d_proj = vec![0.0; sd * td];
    for i in 0..td {
        let row = &projection[i * sd..(i + 1) * sd];
        let proj: f64 = row.iter().zip(student_embedding).map(|(w, e)| w * e).sum();
        let scale = 2.0 * (proj - teacher_embedding[i]) / td as f64;
        for j in 0..sd {
            d_emb[j] += scale * row[j];
            d_proj[i * sd + j] += scale * student_embedding[j];
        }
    }
    Ok((d_emb, d_proj))
}

/// Frozen teacher scores, keyed by utterance id (sorted storage).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherScores {
    scores: BTreeMap<String, f64>,
}

impl TeacherScores {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.scores.keys()
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "id,score")?;
        for (id, score) in &self.scores {
            writeln!(w, "{id},{score}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let r = BufReader::new(File::open(path)?);
        let mut lines = r.lines().enumerate();
        match lines.next() {
            Some((_, Ok(h))) if h.trim() == "id,score" => {}
            Some((_, Ok(h))) => {
                return Err(TrainError::Parse {
                    line: 1,
                    msg: format!("expected header 'id,score', got {h:?}"),
                })
            }
            Some((_, Err(e))) => return Err(e.into()),
            None => {
                return Err(TrainError::Parse {
                    line: 1,
                    msg: "empty file".into(),
                })
            }
        }
        let mut scores = BTreeMap::new();
        for (i, line) in lines {
            let line = line?;
            let line_no = i + 1;
            let (id, value) = line.split_once(',').ok_or_else(|| TrainError::Parse {
                line: line_no,
                msg: "missing comma".into(),
            })?;
            let score: f64 = value.parse().map_err(|e| TrainError::Parse {
                line: line_no,
                msg: format!("bad score: {e}"),
            })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(TrainError::Parse {
                    line: line_no,
                    msg: format!("score {score} outside [0,1]"),
                });
            }
            scores.insert(id.to_string(), score);
        }
        Ok(Self { scores })
    }
}

/// Scores every record with a trained teacher. Fails listing every id the
/// teacher could not score.
pub fn precompute_teacher_scores(
    records: &[UtteranceRecord],
    teacher: &Lrnn,
    teacher_params: &[f64],
) -> Result<TeacherScores, TrainError> {
    let mut scores = BTreeMap::new();
    let mut failed = Vec::new();
    for rec in records {
        match teacher.score(&rec.lattice, teacher_params) {
            Ok(s) => {
                scores.insert(rec.id.clone(), s);
            }
            Err(_) => failed.push(rec.id.clone()),
        }
    }
    if !failed.is_empty() {
        return Err(TrainError::TeacherScoring { ids: failed });
    }
    Ok(TeacherScores { scores })
}

/// What a training objective must provide: per-utterance loss/gradient and
/// a plain score for dev evaluation.
pub trait Objective: Sync {
    fn param_count(&self) -> usize;
    fn init_params(&self, seed: u64) -> Vec<f64>;
    fn loss_grad(
        &self,
        params: &[f64],
        rec: &UtteranceRecord,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, Vec<f64>), TrainError>;
    fn score(&self, params: &[f64], rec: &UtteranceRecord) -> Result<f64, TrainError>;
}

fn weak_target(rec: &UtteranceRecord) -> Result<f64, TrainError> {
    match rec.weak_label {
        Some(WeakLabel::Intended) => Ok(1.0),
        Some(WeakLabel::Unintended) => Ok(0.0),
        _ => Err(TrainError::MissingWeakLabel { id: rec.id.clone() }),
    }
}

/// Teacher trained with plain BCE on weak labels.
pub struct LrnnObjective {
    pub model: Lrnn,
    pub eps: f64,
}

impl Objective for LrnnObjective {
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        self.model.init_params(seed)
    }

    fn loss_grad(
        &self,
        params: &[f64],
        rec: &UtteranceRecord,
        _dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, Vec<f64>), TrainError> {
        let y = weak_target(rec)?;
        let (p, cache) = self.model.forward(&rec.lattice, params)?;
        let loss = bce_loss(p, y, self.eps);
        let grads = self
            .model
            .backward(&rec.lattice, params, &cache, bce_loss_grad(p, y, self.eps))?;
        Ok((loss, grads))
    }

    fn score(&self, params: &[f64], rec: &UtteranceRecord) -> Result<f64, TrainError> {
        Ok(self.model.score(&rec.lattice, params)?)
    }
}

/// Student trained with BCE on weak labels; when `distill` is present the
/// loss adds the frozen-teacher regularizer (score KL or projected
/// embedding MSE, by variant).
pub struct AftmObjective<'a> {
    pub model: Aftm,
    pub eps: f64,
    pub distill: Option<Distillation<'a>>,
}

pub struct Distillation<'a> {
    pub hyper: KdHyper,
    /// Frozen per-id teacher scores (score-KL variant).
    pub teacher_scores: Option<&'a TeacherScores>,
    /// Teacher model + params for on-the-fly embeddings (MSE variant).
    pub teacher: Option<(&'a Lrnn, &'a [f64])>,
}

impl AftmObjective<'_> {
    /// The embedding-MSE variant appends a learned projection
    /// (teacher_dim x d_model) to the student's parameter vector.
    fn projection_len(&self) -> usize {
        match &self.distill {
            Some(d) if d.hyper.variant == KdVariant::EmbeddingMse => {
                let teacher_dim = d.teacher.map(|(t, _)| t.config().hidden_dim).unwrap_or(16);
                teacher_dim * self.model.config().d_model()
            }
            _ => 0,
        }
    }
}

impl Objective for AftmObjective<'_> {
    fn param_count(&self) -> usize {
        self.model.param_count() + self.projection_len()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = self.model.init_params(seed);
        let extra = self.projection_len();
        if extra > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f6a);
            let mut proj = vec![0.0; extra];
            crate::params::uniform_init(&mut proj, self.model.config().d_model(), &mut rng);
            params.extend(proj);
        }
        params
    }

    fn loss_grad(
        &self,
        params: &[f64],
        rec: &UtteranceRecord,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, Vec<f64>), TrainError> {
        let y = weak_target(rec)?;
        let (model_params, proj) = params.split_at(self.model.param_count());
        let (p, cache) = self.model.forward(&rec.features, model_params, dropout)?;

        let mut loss = bce_loss(p, y, self.eps);
        let mut dscore = bce_loss_grad(p, y, self.eps);
        let mut d_embedding: Option<Vec<f64>> = None;
        let mut d_proj: Option<Vec<f64>> = None;

        if let Some(d) = &self.distill {
            match d.hyper.variant {
                KdVariant::ScoreKl => {
                    let scores = d.teacher_scores.expect("score-KL distillation needs scores");
                    let p_t = scores
                        .get(&rec.id)
                        .ok_or_else(|| TrainError::MissingTeacherScore { id: rec.id.clone() })?;
                    loss += d.hyper.alpha * sym_kl(p_t, p, d.hyper.eps);
                    dscore += d.hyper.alpha * sym_kl_grad_q(p_t, p, d.hyper.eps);
                }
                KdVariant::EmbeddingMse => {
                    let (teacher, tp) = d.teacher.expect("embedding distillation needs a teacher");
                    let t_emb = teacher.embed(&rec.lattice, tp)?;
                    let s_emb = cache.embedding();
                    loss += d.hyper.alpha * embed_mse_loss(s_emb, &t_emb, proj)?;
                    let (mut de, mut dp) = embed_mse_loss_grad(s_emb, &t_emb, proj)?;
                    for v in de.iter_mut() {
                        *v *= d.hyper.alpha;
                    }
                    for v in dp.iter_mut() {
                        *v *= d.hyper.alpha;
                    }
                    d_embedding = Some(de);
                    d_proj = Some(dp);
                }
            }
        }

        let (mut grads, _) =
            self.model
                .backward_spliced(model_params, &cache, dscore, d_embedding.as_deref())?;
        match d_proj {
            Some(dp) => grads.extend(dp),
            None => grads.extend(std::iter::repeat_n(0.0, proj.len())),
        }
        Ok((loss, grads))
    }

    fn score(&self, params: &[f64], rec: &UtteranceRecord) -> Result<f64, TrainError> {
        let model_params = &params[..self.model.param_count()];
        Ok(self.model.score(&rec.features, model_params)?)
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_eer: f64,
}

fn dev_eer<O: Objective>(
    obj: &O,
    params: &[f64],
    dev: &[UtteranceRecord],
) -> Result<f64, TrainError> {
    let scores = map_records(dev, |rec| obj.score(params, rec))?;
    let labels: Vec<ClassLabel> = dev.iter().map(|r| r.true_label).collect();
    Ok(eer(&det_curve(&scores, &labels)?))
}

#[cfg(feature = "parallel")]
fn map_records<T, F>(records: &[UtteranceRecord], f: F) -> Result<Vec<T>, TrainError>
where
    T: Send,
    F: Fn(&UtteranceRecord) -> Result<T, TrainError> + Sync + Send,
{
    use rayon::prelude::*;
    records.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_records<T, F>(records: &[UtteranceRecord], f: F) -> Result<Vec<T>, TrainError>
where
    F: Fn(&UtteranceRecord) -> Result<T, TrainError>,
{
    records.iter().map(f).collect()
}

/// Mini-batch Adam with global-norm clipping and dev-EER early stopping.
/// Returns the best-dev-EER checkpoint. Deterministic in (data, hyper,
/// seed): batch order comes from a seeded shuffle, every utterance gets its
/// own dropout stream keyed by (seed, epoch, position), and gradient
/// reduction is in batch order regardless of thread count.
pub fn train_model<O: Objective>(
    obj: &O,
    train: &[UtteranceRecord],
    dev: &[UtteranceRecord],
    hyper: &TrainHyper,
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut params = obj.init_params(hyper.seed);
    let mut adam = AdamState::new(
        params.len(),
        AdamHyper {
            learning_rate: hyper.learning_rate,
            ..AdamHyper::default()
        },
    );

    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_eer = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    for epoch in 0..hyper.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(hyper.batch_size).enumerate() {
            let results = {
                let items: Vec<(usize, usize)> = batch
                    .iter()
                    .enumerate()
                    .map(|(k, &idx)| (k, idx))
                    .collect();
                map_items(&items, |&(k, idx)| {
                    let rec = &train[idx];
                    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
                    dropout_rng
                        .set_stream(((epoch as u64) << 32) | (batch_no * hyper.batch_size + k) as u64);
                    let dropout = if hyper.dropout_rate > 0.0 {
                        Some((hyper.dropout_rate, &mut dropout_rng))
                    } else {
                        None
                    };
                    obj.loss_grad(&params, rec, dropout)
                })?
            };

            let mut mean_grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for (k, (loss, grads)) in results.iter().enumerate() {
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                        id: train[batch[k]].id.clone(),
                    });
                }
                batch_loss += loss;
                for (m, g) in mean_grad.iter_mut().zip(grads) {
                    *m += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for m in mean_grad.iter_mut() {
                *m *= scale;
            }
            epoch_loss += batch_loss * scale;

            let clipped = clip_global_norm(&mean_grad, hyper.clip_norm);
            let (new_params, new_state) = adam_step(&params, &clipped, &adam)?;
            params = new_params;
            adam = new_state;
        }
        let n_batches = order.chunks(hyper.batch_size).count();
        let train_loss = epoch_loss / n_batches as f64;

        let eer_now = dev_eer(obj, &params, dev)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            dev_eer: eer_now,
        });
        if eer_now < best_eer {
            best_eer = eer_now;
            best_params = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale > hyper.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_dev_eer: best_eer,
    })
}

#[cfg(feature = "parallel")]
fn map_items<I, T, F>(items: &[I], f: F) -> Result<Vec<T>, TrainError>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T, TrainError> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_items<I, T, F>(items: &[I], f: F) -> Result<Vec<T>, TrainError>
where
    F: Fn(&I) -> Result<T, TrainError>,
{
    items.iter().map(f).collect()
}

pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    for h in history {
        serde_json::to_writer(&mut w, h).map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
