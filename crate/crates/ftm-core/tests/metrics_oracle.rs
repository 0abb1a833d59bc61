//! DET metrics against a brute-force all-thresholds oracle, plus the
//! monotone-transform invariance property.

use ftm_core::corpus::ClassLabel;
use ftm_core::evalkit::{auc_det, det_curve, eer, far_at_frr, DetCurve, DetPoint};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// O(n^2) curve construction: one pass per candidate threshold, counting
/// directly from the definition.
fn oracle_curve(scores: &[f64], labels: &[ClassLabel]) -> DetCurve {
    let n_i = labels.iter().filter(|l| **l == ClassLabel::Intended).count();
    let n_u = labels.len() - n_i;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut all = vec![f64::NEG_INFINITY];
    all.extend(thresholds);
    all.push(f64::INFINITY);

    let points = all
        .into_iter()
        .map(|t| {
            let mut rejected_i = 0;
            let mut accepted_u = 0;
            for (s, l) in scores.iter().zip(labels) {
                match l {
                    ClassLabel::Intended if *s < t => rejected_i += 1,
                    ClassLabel::Unintended if *s >= t => accepted_u += 1,
                    _ => {}
                }
            }
            DetPoint {
                threshold: t,
                frr: rejected_i as f64 / n_i as f64,
                far: accepted_u as f64 / n_u as f64,
            }
        })
        .collect();
    DetCurve { points }
}

fn random_instance(rng: &mut ChaCha8Rng, n_max: usize) -> (Vec<f64>, Vec<ClassLabel>) {
    let n = rng.random_range(2..=n_max);
    loop {
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                // mixed continuous and tied scores to stress tie handling
                if rng.random::<f64>() < 0.3 {
                    (rng.random_range(0..5) as f64) / 4.0
                } else {
                    rng.random()
                }
            })
            .collect();
        let labels: Vec<ClassLabel> = (0..n)
            .map(|_| {
                if rng.random::<bool>() {
                    ClassLabel::Intended
                } else {
                    ClassLabel::Unintended
                }
            })
            .collect();
        let k = labels.iter().filter(|l| **l == ClassLabel::Intended).count();
        if k > 0 && k < n {
            return (scores, labels);
        }
    }
}

#[test]
fn det_metrics_match_oracle_on_100_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xDE7);
    for trial in 0..100 {
        let (scores, labels) = random_instance(&mut rng, 200);
        let fast = det_curve(&scores, &labels).unwrap();
        let slow = oracle_curve(&scores, &labels);
        assert_eq!(fast.points, slow.points, "trial {trial}: point sets differ");
        assert_eq!(eer(&fast), eer(&slow), "trial {trial}: eer");
        assert_eq!(
            far_at_frr(&fast, 0.04),
            far_at_frr(&slow, 0.04),
            "trial {trial}: fa@4%fr"
        );
        assert_eq!(auc_det(&fast), auc_det(&slow), "trial {trial}: auc");
    }
}

#[test]
fn auc_agrees_with_grid_quadrature() {
    // independent numeric integration of FAR(FRR) on a dense grid
    let mut rng = ChaCha8Rng::seed_from_u64(0xA0C);
    for _ in 0..10 {
        let (scores, labels) = random_instance(&mut rng, 150);
        let curve = det_curve(&scores, &labels).unwrap();
        let grid = 10_000;
        let mut quad = 0.0;
        let mut prev = far_at_frr(&curve, 0.0);
        for k in 1..=grid {
            let frr = k as f64 / grid as f64;
            let far = far_at_frr(&curve, frr);
            quad += (far + prev) / 2.0 / grid as f64;
            prev = far;
        }
        let exact = auc_det(&curve);
        assert!(
            (quad - exact).abs() < 2e-3,
            "quadrature {quad} vs trapezoid {exact}"
        );
    }
}

#[test]
fn eer_is_symmetric_under_label_and_score_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E5);
    for _ in 0..50 {
        // distinct scores only, so the accept-at-threshold boundary has no
        // tie asymmetry under reflection
        let n = rng.random_range(4..100);
        let mut scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores.dedup();
        let labels: Vec<ClassLabel> = (0..scores.len())
            .map(|_| {
                if rng.random::<bool>() {
                    ClassLabel::Intended
                } else {
                    ClassLabel::Unintended
                }
            })
            .collect();
        let k = labels.iter().filter(|l| **l == ClassLabel::Intended).count();
        if k == 0 || k == labels.len() {
            continue;
        }
        let e1 = eer(&det_curve(&scores, &labels).unwrap());
        // orientation check: the detector or its score-reversed twin is the
        // oriented one, and that one sits in [0, 0.5]
        let reversed: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let e_rev = eer(&det_curve(&reversed, &labels).unwrap());
        let oriented = e1.min(e_rev);
        assert!((0.0..=0.5 + 1e-12).contains(&oriented), "oriented eer {oriented}");

        let flipped_scores: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let flipped_labels: Vec<ClassLabel> = labels
            .iter()
            .map(|l| match l {
                ClassLabel::Intended => ClassLabel::Unintended,
                ClassLabel::Unintended => ClassLabel::Intended,
            })
            .collect();
        let e2 = eer(&det_curve(&flipped_scores, &flipped_labels).unwrap());
        assert!((e1 - e2).abs() < 1e-9, "{e1} vs {e2}");
    }
}

proptest! {
    #[test]
    fn monotone_transforms_leave_metrics_unchanged(
        raw in prop::collection::vec((0.0f64..1.0, prop::bool::ANY), 2..120)
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
        let labels: Vec<ClassLabel> = raw
            .iter()
            .map(|(_, i)| if *i { ClassLabel::Intended } else { ClassLabel::Unintended })
            .collect();
        let k = labels.iter().filter(|l| **l == ClassLabel::Intended).count();
        prop_assume!(k > 0 && k < labels.len());

        let base = det_curve(&scores, &labels).unwrap();
        // strictly increasing transforms
        for transform in [|s: f64| s * s * s, |s: f64| s.atan(), |s: f64| 0.2 + 0.5 * s] {
            let mapped: Vec<f64> = scores.iter().map(|s| transform(*s)).collect();
            let curve = det_curve(&mapped, &labels).unwrap();
            let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.frr, p.far)).collect();
            let base_pts: Vec<(f64, f64)> = base.points.iter().map(|p| (p.frr, p.far)).collect();
            prop_assert_eq!(&pts, &base_pts);
            prop_assert_eq!(eer(&curve), eer(&base));
            prop_assert_eq!(auc_det(&curve), auc_det(&base));
        }
    }
}
