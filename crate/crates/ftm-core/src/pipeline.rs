//! File-based pipeline stages. Every stage consumes and produces files, so
//! each intermediate artifact (weak labels, teacher scores, model scores,
//! curves) can be inspected and reruns from any stage are reproducible.

use crate::aftm::{Aftm, AftmConfig};
use crate::corpus::{
    generate_corpus, read_corpus, write_corpus, AcousticParams, ClassLabel, CorpusConfig,
    LatticeParams, UtteranceRecord,
};
use crate::evalkit::{
    det_csv, det_curve, fuse_scores, metrics_summary, read_scores, render_det_svg, write_scores,
    DetCurve, EvalError, MetricsSummary, ScoreRecord,
};
use crate::lrnn::{Lrnn, LrnnConfig};
use crate::params::{load_params, save_params, ParamsError};
use crate::train::{
    precompute_teacher_scores, train_model, write_history, AftmObjective, Distillation, KdHyper,
    LrnnObjective, Objective, TeacherScores, TrainError, TrainHyper,
};
use crate::weaklabel::{apply_weak_labels, CoverageStats, WeakLabelRules};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

fn in_stage<T>(
    stage: &'static str,
    r: Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::Stage {
        stage,
        source: Box::new(e),
    })
}

/// Which model a parameter file belongs to; echoed into the file header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model")]
pub enum ModelSpec {
    #[serde(rename = "lrnn")]
    Lrnn { config: LrnnConfig },
    #[serde(rename = "aftm")]
    Aftm { config: AftmConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lrnn,
    Aftm,
    AftmD,
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Lrnn => "lrnn",
            ModelKind::Aftm => "aftm",
            ModelKind::AftmD => "aftm-d",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lrnn" => Ok(ModelKind::Lrnn),
            "aftm" => Ok(ModelKind::Aftm),
            "aftm-d" => Ok(ModelKind::AftmD),
            other => Err(format!("unknown model {other:?} (lrnn | aftm | aftm-d)")),
        }
    }
}

/// Everything one full run needs; serializable so every stage can echo the
/// resolved configuration next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Raw utterances generated for the training partition; the weak-label
    /// filter keeps roughly 62% of them.
    pub n_train_raw: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Utterance length range (frames), shared by all partitions.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Acoustic and lattice channel parameters, shared by all partitions
    /// (the per-partition SNR/intent calibrations stay fixed).
    pub acoustic: AcousticParams,
    pub lattice: LatticeParams,
    pub weak_rules: WeakLabelRules,
    pub lrnn: LrnnConfig,
    pub aftm: AftmConfig,
    pub lrnn_hyper: TrainHyper,
    pub aftm_hyper: TrainHyper,
    pub kd: KdHyper,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train_raw: 8065,
            n_dev: 1000,
            n_test: 2000,
            min_frames: 30,
            max_frames: 100,
            acoustic: AcousticParams::default(),
            lattice: LatticeParams::default(),
            weak_rules: WeakLabelRules::default(),
            lrnn: LrnnConfig::default(),
            aftm: AftmConfig::tiny(),
            lrnn_hyper: TrainHyper {
                learning_rate: 3e-3,
                dropout_rate: 0.0,
                max_epochs: 20,
                patience: 5,
                ..TrainHyper::default()
            },
            aftm_hyper: TrainHyper {
                learning_rate: 2e-3,
                dropout_rate: 0.1,
                max_epochs: 20,
                patience: 6,
                ..TrainHyper::default()
            },
            kd: KdHyper::default(),
        }
    }
}

impl PipelineConfig {
    /// A much smaller run for smoke tests and demos.
    pub fn mini() -> Self {
        Self {
            n_train_raw: 800,
            n_dev: 200,
            n_test: 400,
            ..Self::default()
        }
    }

    fn partition_seed(&self, k: u64) -> u64 {
        self.seed ^ k.wrapping_mul(0x9E3779B97F4A7C15)
    }
}

fn echo_config(out_dir: &Path, stage: &str, config: &PipelineConfig) -> Result<(), PipelineError> {
    let path = out_dir.join(format!("{stage}.config.json"));
    let text = serde_json::to_string_pretty(config).map_err(std::io::Error::other)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

/// Generates the three partitions: train and dev with the dev-partition
/// calibration, test with the noisier test-partition calibration.
pub fn gen(config: &PipelineConfig, out_dir: &Path) -> Result<GenPaths, PipelineError> {
    std::fs::create_dir_all(out_dir)?;
    echo_config(out_dir, "gen", config)?;
    let run = || -> Result<GenPaths, PipelineError> {
        let customize = |mut c: CorpusConfig, prefix: &str| {
            c.id_prefix = prefix.into();
            c.min_frames = config.min_frames;
            c.max_frames = config.max_frames;
            c.acoustic = config.acoustic;
            c.lattice = config.lattice;
            c
        };
        let train_cfg = customize(
            CorpusConfig::dev_profile(config.n_train_raw, config.partition_seed(1)),
            "trn-",
        );
        let dev_cfg = customize(
            CorpusConfig::dev_profile(config.n_dev, config.partition_seed(2)),
            "dev-",
        );
        let test_cfg = customize(
            CorpusConfig::test_profile(config.n_test, config.partition_seed(3)),
            "tst-",
        );

        let paths = GenPaths {
            train: out_dir.join("train.jsonl"),
            dev: out_dir.join("dev.jsonl"),
            test: out_dir.join("test.jsonl"),
        };
        write_corpus(&paths.train, &generate_corpus(&train_cfg)?)?;
        write_corpus(&paths.dev, &generate_corpus(&dev_cfg)?)?;
        write_corpus(&paths.test, &generate_corpus(&test_cfg)?)?;
        Ok(paths)
    };
    in_stage("gen", run())
}

#[derive(Debug, Clone)]
pub struct WeakLabelPaths {
    pub subset: PathBuf,
    pub stats: PathBuf,
}

pub fn weaklabel(
    corpus_path: &Path,
    rules: &WeakLabelRules,
    out_dir: &Path,
) -> Result<(WeakLabelPaths, CoverageStats), PipelineError> {
    let run = || -> Result<(WeakLabelPaths, CoverageStats), PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        let records = read_corpus(corpus_path)?;
        let (subset, stats) = apply_weak_labels(&records, rules);
        let paths = WeakLabelPaths {
            subset: out_dir.join("weak_train.jsonl"),
            stats: out_dir.join("weaklabel_stats.json"),
        };
        write_corpus(&paths.subset, &subset)?;
        let text = serde_json::to_string_pretty(&stats).map_err(std::io::Error::other)?;
        std::fs::write(&paths.stats, text)?;
        Ok((paths, stats))
    };
    in_stage("weaklabel", run())
}

#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub params: PathBuf,
    pub history: PathBuf,
}

/// Trains one model on the weak-labeled subset with true-label dev EER for
/// early stopping. `aftm-d` requires a teacher score file.
pub fn train(
    kind: ModelKind,
    train_path: &Path,
    dev_path: &Path,
    config: &PipelineConfig,
    teacher_scores_path: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainPaths, PipelineError> {
    let run = || -> Result<TrainPaths, PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        echo_config(out_dir, &format!("train-{}", kind.tag()), config)?;
        let train_set = read_corpus(train_path)?;
        let dev_set = read_corpus(dev_path)?;

        let tag = kind.tag().replace('-', "_");
        let paths = TrainPaths {
            params: out_dir.join(format!("{tag}.params")),
            history: out_dir.join(format!("{tag}_history.jsonl")),
        };

        match kind {
            ModelKind::Lrnn => {
                let obj = LrnnObjective {
                    model: Lrnn::new(config.lrnn),
                    eps: config.kd.eps,
                };
                let hyper = TrainHyper {
                    seed: config.partition_seed(11),
                    ..config.lrnn_hyper
                };
                let out = train_model(&obj, &train_set, &dev_set, &hyper)?;
                save_params(
                    &paths.params,
                    &ModelSpec::Lrnn { config: config.lrnn },
                    &out.params,
                )?;
                write_history(&paths.history, &out.history)?;
            }
            ModelKind::Aftm | ModelKind::AftmD => {
                let teacher_scores = match (kind, teacher_scores_path) {
                    (ModelKind::AftmD, Some(p)) => Some(TeacherScores::read(p)?),
                    (ModelKind::AftmD, None) => {
                        return Err(PipelineError::Config(
                            "training aftm-d requires teacher scores; run the teacher-scores \
                             stage first"
                                .into(),
                        ))
                    }
                    _ => None,
                };
                let obj = AftmObjective {
                    model: Aftm::new(config.aftm),
                    eps: config.kd.eps,
                    distill: teacher_scores.as_ref().map(|ts| Distillation {
                        hyper: config.kd,
                        teacher_scores: Some(ts),
                        teacher: None,
                    }),
                };
                // base and distilled student share the init and shuffle seed
                let hyper = TrainHyper {
                    seed: config.partition_seed(12),
                    ..config.aftm_hyper
                };
                let out = train_model(&obj, &train_set, &dev_set, &hyper)?;
                save_params(
                    &paths.params,
                    &ModelSpec::Aftm { config: config.aftm },
                    &out.params[..Aftm::new(config.aftm).param_count()],
                )?;
                write_history(&paths.history, &out.history)?;
            }
        }
        Ok(paths)
    };
    in_stage("train", run())
}

/// Scores the weak-labeled training subset with a trained teacher and
/// freezes the result to a file.
pub fn teacher_scores(
    lrnn_params_path: &Path,
    subset_path: &Path,
    out_dir: &Path,
) -> Result<PathBuf, PipelineError> {
    let run = || -> Result<PathBuf, PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        let (spec, params): (ModelSpec, Vec<f64>) = load_params(lrnn_params_path)?;
        let config = match spec {
            ModelSpec::Lrnn { config } => config,
            other => {
                return Err(PipelineError::Config(format!(
                    "teacher-scores needs lrnn parameters, file carries {other:?}"
                )))
            }
        };
        let records = read_corpus(subset_path)?;
        let teacher = Lrnn::new(config);
        let scores = precompute_teacher_scores(&records, &teacher, &params)?;
        let path = out_dir.join("teacher_scores.csv");
        scores.write(&path)?;
        Ok(path)
    };
    in_stage("teacher-scores", run())
}

/// Scores a corpus with a trained model; the model type comes from the
/// parameter file's config echo.
pub fn score(
    params_path: &Path,
    corpus_path: &Path,
    model_tag: &str,
    out_path: &Path,
) -> Result<Vec<ScoreRecord>, PipelineError> {
    let run = || -> Result<Vec<ScoreRecord>, PipelineError> {
        let (spec, params): (ModelSpec, Vec<f64>) = load_params(params_path)?;
        let records = read_corpus(corpus_path)?;
        let scores: Vec<ScoreRecord> = match spec {
            ModelSpec::Lrnn { config } => {
                let model = Lrnn::new(config);
                let obj = LrnnObjective { model, eps: 1e-7 };
                score_records(&obj, &params, &records, model_tag)?
            }
            ModelSpec::Aftm { config } => {
                let model = Aftm::new(config);
                let obj = AftmObjective {
                    model,
                    eps: 1e-7,
                    distill: None,
                };
                score_records(&obj, &params, &records, model_tag)?
            }
        };
        if let Some(parent) = out_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_scores(out_path, &scores)?;
        Ok(scores)
    };
    in_stage("score", run())
}

fn score_records<O: Objective>(
    obj: &O,
    params: &[f64],
    records: &[UtteranceRecord],
    tag: &str,
) -> Result<Vec<ScoreRecord>, PipelineError> {
    #[cfg(feature = "parallel")]
    let scores: Result<Vec<f64>, TrainError> = {
        use rayon::prelude::*;
        records.par_iter().map(|r| obj.score(params, r)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let scores: Result<Vec<f64>, TrainError> =
        records.iter().map(|r| obj.score(params, r)).collect();
    Ok(scores?
        .into_iter()
        .zip(records)
        .map(|(score, rec)| ScoreRecord {
            id: rec.id.clone(),
            model_tag: tag.to_string(),
            score,
        })
        .collect())
}

/// Joins score files with true labels, computes the metric table, exports
/// DET curves, and optionally a fused entry and an SVG plot.
pub fn eval(
    score_paths: &[PathBuf],
    labels_path: &Path,
    fuse: bool,
    plot: Option<&Path>,
    out_dir: &Path,
) -> Result<BTreeMap<String, MetricsSummary>, PipelineError> {
    let run = || -> Result<BTreeMap<String, MetricsSummary>, PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        let labels: BTreeMap<String, ClassLabel> = read_corpus(labels_path)?
            .into_iter()
            .map(|r| (r.id, r.true_label))
            .collect();

        let mut sets: Vec<(String, Vec<ScoreRecord>)> = Vec::new();
        for path in score_paths {
            let records = read_scores(path)?;
            let tag = records
                .first()
                .map(|r| r.model_tag.clone())
                .unwrap_or_else(|| path.display().to_string());
            sets.push((tag, records));
        }
        if fuse && sets.len() == 2 {
            let fused = fuse_scores(&sets[0].1, &sets[1].1)?;
            sets.push(("fused".into(), fused));
        }

        let mut table = BTreeMap::new();
        let mut curves: Vec<(String, DetCurve)> = Vec::new();
        for (tag, records) in &sets {
            let curve = curve_against_labels(records, &labels)?;
            std::fs::write(
                out_dir.join(format!("det_{}.csv", tag.replace('-', "_"))),
                det_csv(&curve),
            )?;
            table.insert(tag.clone(), metrics_summary(&curve));
            curves.push((tag.clone(), curve));
        }
        let text = serde_json::to_string_pretty(&table).map_err(std::io::Error::other)?;
        std::fs::write(out_dir.join("metrics.json"), text)?;
        if let Some(plot_path) = plot {
            std::fs::write(plot_path, render_det_svg(&curves))?;
        }
        Ok(table)
    };
    in_stage("eval", run())
}

pub fn curve_against_labels(
    records: &[ScoreRecord],
    labels: &BTreeMap<String, ClassLabel>,
) -> Result<DetCurve, PipelineError> {
    let mut scores = Vec::with_capacity(records.len());
    let mut y = Vec::with_capacity(records.len());
    for r in records {
        let label = labels
            .get(&r.id)
            .ok_or_else(|| EvalError::MissingLabel { id: r.id.clone() })?;
        scores.push(r.score);
        y.push(*label);
    }
    Ok(det_curve(&scores, &y)?)
}

/// The five-row result table plus the ordering checks of a full run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproReport {
    pub seed: u64,
    pub n_train_weak: usize,
    pub rows: Vec<ReportRow>,
    pub orderings: OrderingChecks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub eer: f64,
    pub fa_at_4pct_frr: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingChecks {
    /// teacher beats the baseline acoustic student
    pub lrnn_beats_aftm: bool,
    /// distillation recovers at least 40% of the baseline student's EER
    pub aftm_d_at_most_60pct_of_aftm: bool,
    /// fusing teacher and distilled student does not lose to the teacher
    /// (0.005 absolute slack)
    pub fused_d_close_to_lrnn: bool,
    /// fusing the distilled student works at least as well as fusing the
    /// baseline student
    pub fused_d_not_worse_than_fused_base: bool,
    pub all_ok: bool,
}

/// Runs the whole pipeline in one output directory.
pub fn repro(config: &PipelineConfig, out_dir: &Path) -> Result<ReproReport, PipelineError> {
    std::fs::create_dir_all(out_dir)?;
    echo_config(out_dir, "repro", config)?;
    let gen_paths = gen(config, out_dir)?;
    let (wl_paths, stats) = weaklabel(&gen_paths.train, &config.weak_rules, out_dir)?;

    let lrnn_paths = train(
        ModelKind::Lrnn,
        &wl_paths.subset,
        &gen_paths.dev,
        config,
        None,
        out_dir,
    )?;
    let ts_path = teacher_scores(&lrnn_paths.params, &wl_paths.subset, out_dir)?;
    let aftm_paths = train(
        ModelKind::Aftm,
        &wl_paths.subset,
        &gen_paths.dev,
        config,
        None,
        out_dir,
    )?;
    let aftm_d_paths = train(
        ModelKind::AftmD,
        &wl_paths.subset,
        &gen_paths.dev,
        config,
        Some(&ts_path),
        out_dir,
    )?;

    let s_lrnn = score(
        &lrnn_paths.params,
        &gen_paths.test,
        "lrnn",
        &out_dir.join("scores_lrnn.csv"),
    )?;
    let s_aftm = score(
        &aftm_paths.params,
        &gen_paths.test,
        "aftm",
        &out_dir.join("scores_aftm.csv"),
    )?;
    let s_aftm_d = score(
        &aftm_d_paths.params,
        &gen_paths.test,
        "aftm-d",
        &out_dir.join("scores_aftm_d.csv"),
    )?;

    let fused_base = fuse_scores(&s_lrnn, &s_aftm)?;
    let mut fused_base = fused_base;
    for r in fused_base.iter_mut() {
        r.model_tag = "lrnn&aftm".into();
    }
    let mut fused_d = fuse_scores(&s_lrnn, &s_aftm_d)?;
    for r in fused_d.iter_mut() {
        r.model_tag = "lrnn&aftm-d".into();
    }
    write_scores(&out_dir.join("scores_lrnn_aftm.csv"), &fused_base)?;
    write_scores(&out_dir.join("scores_lrnn_aftm_d.csv"), &fused_d)?;

    let labels: BTreeMap<String, ClassLabel> = read_corpus(&gen_paths.test)?
        .into_iter()
        .map(|r| (r.id, r.true_label))
        .collect();

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut metric_of = BTreeMap::new();
    for (name, records) in [
        ("AFTM", &s_aftm),
        ("LRNN", &s_lrnn),
        ("AFTM-D", &s_aftm_d),
        ("LRNN&AFTM", &fused_base),
        ("LRNN&AFTM-D", &fused_d),
    ] {
        let curve = curve_against_labels(records, &labels)?;
        let m = metrics_summary(&curve);
        rows.push(ReportRow {
            model: name.to_string(),
            eer: m.eer,
            fa_at_4pct_frr: m.fa_at_4pct_frr,
            auc: m.auc,
        });
        metric_of.insert(name.to_string(), m);
        curves.push((name.to_string(), curve));
    }
    std::fs::write(out_dir.join("det.svg"), render_det_svg(&curves))?;

    let eer_of = |name: &str| metric_of[name].eer;
    let orderings = {
        let a = eer_of("LRNN") < eer_of("AFTM");
        let b = eer_of("AFTM-D") <= 0.6 * eer_of("AFTM");
        let c = eer_of("LRNN&AFTM-D") <= eer_of("LRNN") + 0.005;
        let d = eer_of("LRNN&AFTM") >= eer_of("LRNN&AFTM-D");
        OrderingChecks {
            lrnn_beats_aftm: a,
            aftm_d_at_most_60pct_of_aftm: b,
            fused_d_close_to_lrnn: c,
            fused_d_not_worse_than_fused_base: d,
            all_ok: a && b && c && d,
        }
    };

    let report = ReproReport {
        seed: config.seed,
        n_train_weak: stats.n_total - stats.n_discarded,
        rows,
        orderings,
    };
    let text = serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?;
    std::fs::write(out_dir.join("report.json"), text)?;
    Ok(report)
}
