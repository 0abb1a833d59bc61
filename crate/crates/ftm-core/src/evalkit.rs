//! Detection-error metrics and score fusion.
//!
//! Decision rule: predict Intended iff score >= threshold. Sweeping the
//! threshold over every distinct score (plus -inf/+inf sentinels) yields
//! the DET curve; EER and FA@FRR come from linear interpolation between
//! adjacent operating points, AUC from the trapezoid rule over FRR in
//! [0, 1]. Lower is better for all three.

use crate::corpus::ClassLabel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need both classes, got {intended} intended / {unintended} unintended")]
    SingleClass { intended: usize, unintended: usize },
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {score} for id {id} outside [0,1]")]
    ScoreRange { id: String, score: f64 },
    #[error("id sets differ; only in left: {left_only:?}, only in right: {right_only:?}")]
    IdMismatch {
        left_only: Vec<String>,
        right_only: Vec<String>,
    },
    #[error("duplicate id {id}")]
    DuplicateId { id: String },
    #[error("no label for id {id}")]
    MissingLabel { id: String },
    #[error("score io: {0}")]
    Io(#[from] std::io::Error),
    #[error("score file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One scored utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub model_tag: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

/// Operating points ordered by threshold: FRR non-decreasing, FAR
/// non-increasing, endpoints at (frr 0, far 1) and (frr 1, far 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

/// Builds the DET curve from scores and ground truth.
pub fn det_curve(scores: &[f64], labels: &[ClassLabel]) -> Result<DetCurve, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_intended = labels.iter().filter(|l| **l == ClassLabel::Intended).count();
    let n_unintended = labels.len() - n_intended;
    if n_intended == 0 || n_unintended == 0 {
        return Err(EvalError::SingleClass {
            intended: n_intended,
            unintended: n_unintended,
        });
    }

    let mut pairs: Vec<(f64, ClassLabel)> = scores.iter().cloned().zip(labels.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    let mut points = Vec::new();
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        frr: 0.0,
        far: 1.0,
    });
    // at threshold t (= some distinct score): rejected intended have
    // score < t, accepted unintended have score >= t
    let mut rejected_intended = 0usize;
    let mut rejected_unintended = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        points.push(DetPoint {
            threshold: t,
            frr: rejected_intended as f64 / n_intended as f64,
            far: (n_unintended - rejected_unintended) as f64 / n_unintended as f64,
        });
        // consume the tie group at t
        while i < pairs.len() && pairs[i].0 == t {
            match pairs[i].1 {
                ClassLabel::Intended => rejected_intended += 1,
                ClassLabel::Unintended => rejected_unintended += 1,
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        frr: 1.0,
        far: 0.0,
    });
    Ok(DetCurve { points })
}

/// Equal error rate: the FRR (= FAR) at the crossing of the two error
/// curves, linearly interpolated along the polyline.
pub fn eer(curve: &DetCurve) -> f64 {
    let pts = &curve.points;
    for w in pts.windows(2) {
        let d0 = w[0].frr - w[0].far;
        let d1 = w[1].frr - w[1].far;
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return w[0].frr;
            }
            let lambda = -d0 / (d1 - d0);
            return w[0].frr + lambda * (w[1].frr - w[0].frr);
        }
    }
    // frr - far is non-decreasing from -1 to +1, so a crossing always exists
    unreachable!("DET curve without an EER crossing")
}

/// FAR at a target FRR, linearly interpolated. Where the curve is vertical
/// at the target this returns the best (lowest) achievable FAR.
pub fn far_at_frr(curve: &DetCurve, target_frr: f64) -> f64 {
    let pts = &curve.points;
    let mut j = 0;
    for (k, p) in pts.iter().enumerate() {
        if p.frr <= target_frr {
            j = k;
        } else {
            break;
        }
    }
    if pts[j].frr == target_frr {
        return pts[j].far;
    }
    let (a, b) = (&pts[j], &pts[j + 1]);
    let lambda = (target_frr - a.frr) / (b.frr - a.frr);
    a.far + lambda * (b.far - a.far)
}

/// Area under FAR as a function of FRR over [0, 1] (trapezoid rule).
pub fn auc_det(curve: &DetCurve) -> f64 {
    let mut area = 0.0;
    for w in curve.points.windows(2) {
        area += (w[1].frr - w[0].frr) * (w[0].far + w[1].far) * 0.5;
    }
    area
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub eer: f64,
    pub fa_at_4pct_frr: f64,
    pub auc: f64,
}

pub fn metrics_summary(curve: &DetCurve) -> MetricsSummary {
    MetricsSummary {
        eer: eer(curve),
        fa_at_4pct_frr: far_at_frr(curve, 0.04),
        auc: auc_det(curve),
    }
}

fn index_by_id(records: &[ScoreRecord]) -> Result<BTreeMap<&str, f64>, EvalError> {
    let mut map = BTreeMap::new();
    for r in records {
        if !(0.0..=1.0).contains(&r.score) {
            return Err(EvalError::ScoreRange {
                id: r.id.clone(),
                score: r.score,
            });
        }
        if map.insert(r.id.as_str(), r.score).is_some() {
            return Err(EvalError::DuplicateId { id: r.id.clone() });
        }
    }
    Ok(map)
}

fn check_same_ids(
    a: &BTreeMap<&str, f64>,
    b: &BTreeMap<&str, f64>,
) -> Result<(), EvalError> {
    if a.len() == b.len() && a.keys().eq(b.keys()) {
        return Ok(());
    }
    let left_only = a
        .keys()
        .filter(|k| !b.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    let right_only = b
        .keys()
        .filter(|k| !a.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    Err(EvalError::IdMismatch {
        left_only,
        right_only,
    })
}

/// Per-id arithmetic mean of two score sets; output tagged "fused".
pub fn fuse_scores(a: &[ScoreRecord], b: &[ScoreRecord]) -> Result<Vec<ScoreRecord>, EvalError> {
    weighted_combination(a, b, 0.5, "fused")
}

fn weighted_combination(
    a: &[ScoreRecord],
    b: &[ScoreRecord],
    w: f64,
    tag: &str,
) -> Result<Vec<ScoreRecord>, EvalError> {
    let ia = index_by_id(a)?;
    let ib = index_by_id(b)?;
    check_same_ids(&ia, &ib)?;
    Ok(ia
        .iter()
        .map(|(id, sa)| ScoreRecord {
            id: id.to_string(),
            model_tag: tag.to_string(),
            score: w * sa + (1.0 - w) * ib[id],
        })
        .collect())
}

/// Grid-searches the fusion weight w in {0, 0.05, ..., 1} on dev EER
/// (ties broken toward w = 0.5), then applies the winner to the two
/// evaluation score sets.
pub fn weighted_fuse(
    a: &[ScoreRecord],
    b: &[ScoreRecord],
    dev_a: &[ScoreRecord],
    dev_b: &[ScoreRecord],
    dev_labels: &BTreeMap<String, ClassLabel>,
) -> Result<(f64, Vec<ScoreRecord>), EvalError> {
    let mut best: Option<(f64, f64)> = None; // (eer, w)
    for k in 0..=20 {
        let w = k as f64 / 20.0;
        let fused = weighted_combination(dev_a, dev_b, w, "fused")?;
        let mut scores = Vec::with_capacity(fused.len());
        let mut labels = Vec::with_capacity(fused.len());
        for r in &fused {
            let label = dev_labels
                .get(&r.id)
                .ok_or_else(|| EvalError::MissingLabel { id: r.id.clone() })?;
            scores.push(r.score);
            labels.push(*label);
        }
        let e = eer(&det_curve(&scores, &labels)?);
        let better = match best {
            None => true,
            Some((be, bw)) => e < be || (e == be && (w - 0.5).abs() < (bw - 0.5).abs()),
        };
        if better {
            best = Some((e, w));
        }
    }
    let (_, w) = best.expect("non-empty grid");
    let fused = weighted_combination(a, b, w, "fused")?;
    Ok((w, fused))
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "id,model_tag,score")?;
    for r in records {
        writeln!(w, "{},{},{}", r.id, r.model_tag, r.score)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, EvalError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if i == 0 {
            if line.trim() != "id,model_tag,score" {
                return Err(EvalError::Parse {
                    line: 1,
                    msg: format!("expected header 'id,model_tag,score', got {line:?}"),
                });
            }
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (id, tag, score) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(EvalError::Parse {
                    line: line_no,
                    msg: "expected three comma-separated fields".into(),
                })
            }
        };
        let score: f64 = score.parse().map_err(|e| EvalError::Parse {
            line: line_no,
            msg: format!("bad score: {e}"),
        })?;
        out.push(ScoreRecord {
            id: id.to_string(),
            model_tag: tag.to_string(),
            score,
        });
    }
    Ok(out)
}

/// DET curve as a "threshold,frr,far" table.
pub fn det_csv(curve: &DetCurve) -> String {
    let mut s = String::from("threshold,frr,far\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.frr, p.far);
    }
    s
}

const SVG_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Renders one SVG with a polyline per named curve, linear error axes.
pub fn render_det_svg(curves: &[(String, DetCurve)]) -> String {
    let (w, h) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let x = |far: f64| ml + far * pw;
    let y = |frr: f64| mt + (1.0 - frr) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            x(v),
            y(0.0),
            x(v),
            y(1.0)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            x(0.0),
            y(v),
            x(1.0),
            y(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{:.1}</text>"#,
            x(v),
            h - mb + 16.0,
            v
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.1}</text>"#,
            ml - 6.0,
            y(v) + 4.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">false-accept rate</text>"#,
        ml + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.1})">false-reject rate</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let mut pts = String::new();
        for p in &curve.points {
            let _ = write!(pts, "{:.2},{:.2} ", x(p.far), y(p.frr));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.trim_end()
        );
        let ly = mt + 18.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            ml + pw - 150.0,
            ml + pw - 120.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12">{name}</text>"#,
            ml + pw - 114.0,
            ly + 4.0
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}
