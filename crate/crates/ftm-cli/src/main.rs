//! `ftm` — the end-to-end false-trigger-mitigation pipeline.
//!
//! Stages are file-based: gen writes corpora, weaklabel filters the
//! training partition, train fits a model, teacher-scores freezes the
//! teacher's soft labels, score and eval produce the result tables, and
//! repro chains everything and checks the expected result orderings.
//!
//! Exit codes: 0 success, 1 usage or pipeline error, 2 ordering violation.

use clap::{Parser, Subcommand};
use ftm_core::pipeline::{self, ModelKind, PipelineConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ftm", version, about = "keyword-free false-trigger mitigation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/test corpora (dev/dev/test calibration profiles).
    Gen {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Apply the weak-labeling rules to a corpus and report coverage.
    Weaklabel {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train lrnn, aftm, or aftm-d on a weak-labeled subset.
    Train {
        #[arg(long)]
        model: ModelKindArg,
        #[arg(long, value_name = "FILE")]
        train: PathBuf,
        #[arg(long, value_name = "FILE")]
        dev: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Frozen teacher scores (required for --model aftm-d).
        #[arg(long, value_name = "FILE")]
        teacher_scores: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Freeze teacher scores for a weak-labeled subset.
    TeacherScores {
        #[arg(long, value_name = "FILE")]
        params: PathBuf,
        #[arg(long, value_name = "FILE")]
        train: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score a corpus with a trained model.
    Score {
        #[arg(long, value_name = "FILE")]
        params: PathBuf,
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, default_value = "model")]
        tag: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Evaluate score files against true labels (EER, FA@4%FR, AUC).
    Eval {
        /// One or more score files.
        #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        /// Corpus file carrying the true labels.
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        /// Add an equal-weight fusion row (needs exactly two score files).
        #[arg(long)]
        fuse: bool,
        /// Write a DET plot to this SVG path.
        #[arg(long, value_name = "FILE")]
        plot: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the full pipeline and check the result orderings.
    Repro {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the small smoke-test configuration.
        #[arg(long)]
        mini: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the default pipeline configuration as JSON.
    DefaultConfig {
        /// Print the small smoke-test configuration instead.
        #[arg(long)]
        mini: bool,
    },
}

#[derive(Clone, Copy)]
struct ModelKindArg(ModelKind);

impl std::str::FromStr for ModelKindArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(ModelKindArg)
    }
}

fn load_config(
    path: &Option<PathBuf>,
    seed: Option<u64>,
    mini: bool,
) -> Result<PipelineConfig, String> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| format!("cannot parse config {}: {e}", p.display()))?
        }
        None if mini => PipelineConfig::mini(),
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn print_metrics_table(table: &std::collections::BTreeMap<String, ftm_core::evalkit::MetricsSummary>) {
    println!("{:<14} {:>8} {:>10} {:>8}", "model", "EER", "FA@4%FR", "AUC");
    for (tag, m) in table {
        println!(
            "{:<14} {:>8.4} {:>10.4} {:>8.4}",
            tag, m.eer, m.fa_at_4pct_frr, m.auc
        );
    }
}

fn run() -> Result<ExitCode, String> {
    let cli = Cli::try_parse().map_err(|e| e.to_string())?;
    match cli.command {
        Command::Gen { config, seed, out } => {
            let config = load_config(&config, seed, false)?;
            let paths = pipeline::gen(&config, &out).map_err(|e| e.to_string())?;
            println!("wrote {}", paths.train.display());
            println!("wrote {}", paths.dev.display());
            println!("wrote {}", paths.test.display());
        }
        Command::Weaklabel {
            corpus,
            config,
            out,
        } => {
            let config = load_config(&config, None, false)?;
            let (paths, stats) = pipeline::weaklabel(&corpus, &config.weak_rules, &out)
                .map_err(|e| e.to_string())?;
            println!("wrote {}", paths.subset.display());
            println!(
                "covered {} of {} records (discard fraction {:.4})",
                stats.n_total - stats.n_discarded,
                stats.n_total,
                stats.discard_fraction
            );
            println!(
                "branch error rates: unintended {:.4}, intended {:.4}",
                stats.error_rate_unintended_branch, stats.error_rate_intended_branch
            );
        }
        Command::Train {
            model,
            train,
            dev,
            config,
            seed,
            teacher_scores,
            out,
        } => {
            let config = load_config(&config, seed, false)?;
            let paths = pipeline::train(
                model.0,
                &train,
                &dev,
                &config,
                teacher_scores.as_deref(),
                &out,
            )
            .map_err(|e| e.to_string())?;
            println!("wrote {}", paths.params.display());
            println!("wrote {}", paths.history.display());
        }
        Command::TeacherScores { params, train, out } => {
            let path = pipeline::teacher_scores(&params, &train, &out)
                .map_err(|e| e.to_string())?;
            println!("wrote {}", path.display());
        }
        Command::Score {
            params,
            corpus,
            tag,
            out,
        } => {
            let scores =
                pipeline::score(&params, &corpus, &tag, &out).map_err(|e| e.to_string())?;
            println!("wrote {} ({} records)", out.display(), scores.len());
        }
        Command::Eval {
            scores,
            labels,
            fuse,
            plot,
            out,
        } => {
            let table = pipeline::eval(&scores, &labels, fuse, plot.as_deref(), &out)
                .map_err(|e| e.to_string())?;
            print_metrics_table(&table);
        }
        Command::Repro {
            config,
            seed,
            mini,
            out,
        } => {
            let config = load_config(&config, seed, mini)?;
            let report = pipeline::repro(&config, &out).map_err(|e| e.to_string())?;
            println!(
                "{:<14} {:>8} {:>10} {:>8}",
                "model", "EER", "FA@4%FR", "AUC"
            );
            for row in &report.rows {
                println!(
                    "{:<14} {:>8.4} {:>10.4} {:>8.4}",
                    row.model, row.eer, row.fa_at_4pct_frr, row.auc
                );
            }
            println!("orderings: {}", serde_json::to_string(&report.orderings).unwrap());
            if !report.orderings.all_ok {
                eprintln!("result orderings violated; see report.json");
                return Ok(ExitCode::from(2));
            }
        }
        Command::DefaultConfig { mini } => {
            let config = if mini {
                PipelineConfig::mini()
            } else {
                PipelineConfig::default()
            };
            println!("{}", serde_json::to_string_pretty(&config).unwrap());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
