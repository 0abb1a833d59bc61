//! Deterministic weak labeling from SNR and simulated intent output.
//!
//! Rule 1: snr <= 5 dB and intent Background      -> weak Unintended
//! Rule 2: snr >= 15 dB and intent NotBackground  -> weak Intended
//! Rule 3: anything else is discarded and never enters a training set.
//!
//! Both boundaries are inclusive.

use crate::corpus::{ClassLabel, IntentOutput, UtteranceRecord, WeakLabel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelRules {
    pub low_snr_db: f64,
    pub high_snr_db: f64,
}

impl Default for WeakLabelRules {
    fn default() -> Self {
        Self {
            low_snr_db: 5.0,
            high_snr_db: 15.0,
        }
    }
}

impl WeakLabelRules {
    pub fn label(&self, snr_db: f64, intent: IntentOutput) -> WeakLabel {
        if snr_db <= self.low_snr_db && intent == IntentOutput::Background {
            WeakLabel::Unintended
        } else if snr_db >= self.high_snr_db && intent == IntentOutput::NotBackground {
            WeakLabel::Intended
        } else {
            WeakLabel::Discarded
        }
    }
}

/// Rule application at the default 5 / 15 dB thresholds.
pub fn weak_label(snr_db: f64, intent: IntentOutput) -> WeakLabel {
    WeakLabelRules::default().label(snr_db, intent)
}

/// Coverage and error statistics of the weak labels against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub n_total: usize,
    pub n_discarded: usize,
    pub discard_fraction: f64,
    /// Fraction of weak-Unintended records whose true label is Intended.
    pub error_rate_unintended_branch: f64,
    /// Fraction of weak-Intended records whose true label is Unintended.
    pub error_rate_intended_branch: f64,
    pub weak_label_accuracy_on_covered: f64,
}

/// Labels every record, returning the covered subset (weak_label set) and
/// the coverage statistics. True labels are read, never written.
pub fn apply_weak_labels(
    records: &[UtteranceRecord],
    rules: &WeakLabelRules,
) -> (Vec<UtteranceRecord>, CoverageStats) {
    let mut subset = Vec::new();
    let mut n_weak_unintended = 0usize;
    let mut n_weak_intended = 0usize;
    let mut err_unintended = 0usize;
    let mut err_intended = 0usize;
    for rec in records {
        let label = rules.label(rec.snr_db, rec.intent_output);
        match label {
            WeakLabel::Discarded => continue,
            WeakLabel::Unintended => {
                n_weak_unintended += 1;
                if rec.true_label == ClassLabel::Intended {
                    err_unintended += 1;
                }
            }
            WeakLabel::Intended => {
                n_weak_intended += 1;
                if rec.true_label == ClassLabel::Unintended {
                    err_intended += 1;
                }
            }
        }
        let mut covered = rec.clone();
        covered.weak_label = Some(label);
        subset.push(covered);
    }

    let n_total = records.len();
    let n_covered = subset.len();
    let n_discarded = n_total - n_covered;
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let stats = CoverageStats {
        n_total,
        n_discarded,
        discard_fraction: frac(n_discarded, n_total),
        error_rate_unintended_branch: frac(err_unintended, n_weak_unintended),
        error_rate_intended_branch: frac(err_intended, n_weak_intended),
        weak_label_accuracy_on_covered: frac(
            n_covered - err_unintended - err_intended,
            n_covered,
        ),
    };
    (subset, stats)
}

/// The two numbers reported for a held-out partition: how much of it the
/// rules cannot label at all, and how accurate they are where they can.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub outside_band_fraction: f64,
    pub covered_accuracy: f64,
}

pub fn test_band_report(records: &[UtteranceRecord], rules: &WeakLabelRules) -> BandReport {
    let (_, stats) = apply_weak_labels(records, rules);
    BandReport {
        outside_band_fraction: stats.discard_fraction,
        covered_accuracy: stats.weak_label_accuracy_on_covered,
    }
}
