//! Samplers for the synthetic corpus: SNR, features, lattices, intent.

use super::{
    AcousticParams, ClassLabel, CorpusConfig, FeatureSequence, IntentOutput, IntentParams,
    Lattice, LatticeArc, LatticeParams, FEATURE_DIM, SNR_CLIP_DB,
};
use crate::numkit::sigmoid;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Draws an SNR in dB from the class-conditional normal, clipped to the
/// global range.
pub fn sample_snr<R: Rng>(class: ClassLabel, config: &CorpusConfig, rng: &mut R) -> f64 {
    let (mean, std) = match class {
        ClassLabel::Intended => (config.snr.mean_intended, config.snr.std_intended),
        ClassLabel::Unintended => (config.snr.mean_unintended, config.snr.std_unintended),
    };
    let draw = Normal::new(mean, std).expect("std validated").sample(rng);
    draw.clamp(SNR_CLIP_DB.0, SNR_CLIP_DB.1)
}

/// Fixed unit-RMS spectral pattern whose signed amplitude carries the class.
fn class_pattern(d: usize) -> f64 {
    let x = (d as f64 + 0.5) * 2.0 * std::f64::consts::PI * 2.0 / FEATURE_DIM as f64;
    std::f64::consts::SQRT_2 * x.sin()
}

/// The two generative components of a feature matrix, kept separate so the
/// realized power ratio can be measured directly.
#[derive(Debug, Clone)]
pub struct FeatureParts {
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
    pub combined: FeatureSequence,
}

fn mean_power(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// Builds frames = signal + noise where the signal is a class-conditional
/// pattern plus AR(1) smoothing and the white noise is scaled so the
/// realized power ratio equals `snr_db` exactly. Values are quantized to
/// 1e-4 for compact serialization.
pub fn synth_features_parts<R: Rng>(
    class: ClassLabel,
    snr_db: f64,
    n_frames: usize,
    params: &AcousticParams,
    rng: &mut R,
) -> FeatureParts {
    assert!(n_frames >= 1);
    let d = FEATURE_DIM;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let amp = class.sign() * params.pattern_amp + params.amp_noise * std_normal.sample(rng);
    let gain =
        params.gain_snr * (snr_db - 10.0) / 20.0 + params.gain_noise * std_normal.sample(rng);

    let rho = params.ar_coeff;
    let innov = (1.0 - rho * rho).sqrt();
    let mut ar_state: Vec<f64> = (0..d).map(|_| std_normal.sample(rng)).collect();
    let mut signal = Vec::with_capacity(n_frames * d);
    for t in 0..n_frames {
        if t > 0 {
            for s in ar_state.iter_mut() {
                *s = rho * *s + innov * std_normal.sample(rng);
            }
        }
        for (j, s) in ar_state.iter().enumerate() {
            signal.push(amp * class_pattern(j) + gain + params.ar_scale * s);
        }
    }

    let mut noise: Vec<f64> = (0..n_frames * d).map(|_| std_normal.sample(rng)).collect();
    let p_signal = mean_power(&signal);
    let p_raw = mean_power(&noise);
    let target_noise_power = p_signal / 10f64.powf(snr_db / 10.0);
    let scale = (target_noise_power / p_raw).sqrt();
    for v in noise.iter_mut() {
        *v *= scale;
    }

    let frames: Vec<f64> = signal
        .iter()
        .zip(&noise)
        .map(|(s, n)| ((s + n) * 1e4).round() / 1e4)
        .collect();
    let combined = FeatureSequence::new(n_frames, d, frames).expect("constructive features");
    FeatureParts {
        signal,
        noise,
        combined,
    }
}

pub fn synth_features<R: Rng>(
    class: ClassLabel,
    snr_db: f64,
    n_frames: usize,
    params: &AcousticParams,
    rng: &mut R,
) -> FeatureSequence {
    synth_features_parts(class, snr_db, n_frames, params, rng).combined
}

/// Confusability latent shared by lattice structure and word choice.
fn lattice_latent<R: Rng>(
    class: ClassLabel,
    snr_db: f64,
    params: &LatticeParams,
    rng: &mut R,
) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    params.class_shift * class.sign()
        + params.latent_noise * std_normal.sample(rng)
        + params.snr_coupling * (snr_db - 10.0) / 20.0
}

fn binomial<R: Rng>(n: usize, p: f64, rng: &mut R) -> usize {
    let p = p.clamp(0.0, 1.0);
    (0..n).filter(|_| rng.random::<f64>() < p).count()
}

/// Dirichlet draw via normalized Gamma variates.
fn dirichlet<R: Rng>(alphas: &[f64], rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            rand_distr::Gamma::new(a, 1.0)
                .expect("alpha > 0")
                .sample(rng)
                .max(1e-12)
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// Samples a layered word lattice. High-latent (clean, intended-like)
/// utterances come out near-linear with posterior mass concentrated on one
/// arc per node; low-latent ones come out wide with flat posteriors.
pub fn synth_lattice<R: Rng>(
    class: ClassLabel,
    snr_db: f64,
    params: &LatticeParams,
    rng: &mut R,
) -> Lattice {
    let z = lattice_latent(class, snr_db, params, rng);
    let peak = sigmoid(params.gain * z);
    let depth = rng.random_range(params.min_depth..=params.max_depth);

    // layer node ids: start, depth inner layers, end
    let mut layers: Vec<Vec<usize>> = Vec::with_capacity(depth + 2);
    let mut next_id = 0usize;
    layers.push(vec![next_id]);
    next_id += 1;
    for _ in 0..depth {
        let extra = binomial(params.max_width - 1, (1.0 - peak) * params.branch_rate, rng);
        let width = 1 + extra;
        layers.push((0..width).map(|_| {
            let id = next_id;
            next_id += 1;
            id
        }).collect());
    }
    layers.push(vec![next_id]);
    let node_count = next_id + 1;

    // connect consecutive layers, guaranteeing every node is wired both ways
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for l in 0..layers.len() - 1 {
        let (cur, next) = (&layers[l], &layers[l + 1]);
        let mut covered = vec![false; next.len()];
        for &src in cur {
            let fanout = 1 + binomial(next.len() - 1, 0.5 * (1.0 - peak), rng);
            let mut picks: Vec<usize> = (0..next.len()).collect();
            for k in 0..fanout {
                let j = rng.random_range(k..picks.len());
                picks.swap(k, j);
            }
            for &t in picks.iter().take(fanout) {
                covered[t] = true;
                edges.push((src, next[t]));
            }
        }
        for (t, cov) in covered.iter().enumerate() {
            if !cov {
                let src = cur[rng.random_range(0..cur.len())];
                edges.push((src, next[t]));
            }
        }
    }

    // group outgoing edges per source node, then score them
    edges.sort_unstable();
    edges.dedup();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let half_vocab = params.vocab_size / 2;
    let mut arcs = Vec::with_capacity(edges.len());
    let mut i = 0;
    while i < edges.len() {
        let src = edges[i].0;
        let mut j = i;
        while j < edges.len() && edges[j].0 == src {
            j += 1;
        }
        let k = j - i;
        let mut alphas = vec![1.0; k];
        alphas[rng.random_range(0..k)] = 1.0 + params.peak_boost * peak;
        let posteriors = dirichlet(&alphas, rng);
        for (e, post) in edges[i..j].iter().zip(posteriors) {
            let command_word = rng.random::<f64>() < sigmoid(z);
            let word_id = if command_word {
                rng.random_range(0..half_vocab)
            } else {
                half_vocab + rng.random_range(0..params.vocab_size - half_vocab)
            };
            let log_post = post.max(1e-4).ln();
            arcs.push(LatticeArc {
                src: e.0,
                dst: e.1,
                word_id,
                am_score: 0.7 * log_post + 0.2 * std_normal.sample(rng),
                lm_score: 0.3 * log_post + 0.2 * std_normal.sample(rng),
                posterior: post,
            });
        }
        i = j;
    }

    Lattice { node_count, arcs }
}

/// P(NotBackground | class, snr) under the calibrated logistic.
pub fn intent_nb_probability(class: ClassLabel, snr_db: f64, params: &IntentParams) -> f64 {
    let (m, w) = match class {
        ClassLabel::Intended => (params.midpoint_intended, params.width_intended),
        ClassLabel::Unintended => (params.midpoint_unintended, params.width_unintended),
    };
    sigmoid((snr_db - m) / w)
}

/// Simulates the text-intent classifier acting on (noisy) ASR output.
pub fn simulate_intent_classifier<R: Rng>(
    class: ClassLabel,
    snr_db: f64,
    params: &IntentParams,
    rng: &mut R,
) -> IntentOutput {
    if rng.random::<f64>() < intent_nb_probability(class, snr_db, params) {
        IntentOutput::NotBackground
    } else {
        IntentOutput::Background
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{utterance_rng, RngChannel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn snr_means_match_profile_targets() {
        // Fig-2-style check: class means near 20 dB and 0 dB on the dev
        // calibration at n = 10,000 draws each.
        let config = CorpusConfig::dev_profile(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mean = |class: ClassLabel, rng: &mut ChaCha8Rng| {
            (0..10_000)
                .map(|_| sample_snr(class, &config, rng))
                .sum::<f64>()
                / 10_000.0
        };
        let mi = mean(ClassLabel::Intended, &mut rng);
        let mu = mean(ClassLabel::Unintended, &mut rng);
        assert!((mi - 20.0).abs() <= 0.3, "intended mean {mi}");
        assert!((mu - 0.0).abs() <= 0.3, "unintended mean {mu}");
    }

    #[test]
    fn snr_sampling_is_deterministic_per_stream() {
        let config = CorpusConfig::default();
        let mut a = utterance_rng(7, 3, RngChannel::Snr);
        let mut b = utterance_rng(7, 3, RngChannel::Snr);
        for _ in 0..10 {
            assert_eq!(
                sample_snr(ClassLabel::Intended, &config, &mut a),
                sample_snr(ClassLabel::Intended, &config, &mut b)
            );
        }
    }

    #[test]
    fn features_have_requested_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = synth_features(
            ClassLabel::Intended,
            12.0,
            17,
            &AcousticParams::default(),
            &mut rng,
        );
        assert_eq!(f.n_frames(), 17);
        assert_eq!(f.n_dims(), FEATURE_DIM);
    }

    #[test]
    fn realized_power_ratio_matches_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for &snr in &[-8.0, 0.0, 10.0, 25.0] {
            let parts = synth_features_parts(
                ClassLabel::Unintended,
                snr,
                60,
                &AcousticParams::default(),
                &mut rng,
            );
            let ps = super::mean_power(&parts.signal);
            let pn = super::mean_power(&parts.noise);
            let realized = 10.0 * (ps / pn).log10();
            assert!((realized - snr).abs() < 1.0, "snr {snr} realized {realized}");
        }
    }

    #[test]
    fn high_snr_features_track_the_clean_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let parts = synth_features_parts(
            ClassLabel::Intended,
            40.0,
            80,
            &AcousticParams::default(),
            &mut rng,
        );
        let x = parts.combined.data();
        let y = &parts.signal;
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (a, b) in x.iter().zip(y) {
            cov += (a - mx) * (b - my);
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
        }
        let corr = cov / (vx * vy).sqrt();
        assert!(corr > 0.99, "correlation {corr}");
    }

    #[test]
    fn lattices_have_single_start_and_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..50 {
            let class = if i % 2 == 0 {
                ClassLabel::Intended
            } else {
                ClassLabel::Unintended
            };
            let lat = synth_lattice(class, 10.0, &LatticeParams::default(), &mut rng);
            lat.validate().unwrap();
            // no arcs into start, none out of end, checked structurally
            assert!(lat.arcs.iter().all(|a| a.dst != 0 && a.src != lat.end_node()));
        }
    }

    #[test]
    fn unintended_lattices_have_higher_posterior_entropy() {
        let params = LatticeParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mean_entropy = |class: ClassLabel, snr: f64, rng: &mut ChaCha8Rng| {
            let mut total = 0.0;
            let mut nodes = 0usize;
            for _ in 0..1000 {
                let lat = synth_lattice(class, snr, &params, rng);
                let mut by_src: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
                for a in &lat.arcs {
                    by_src.entry(a.src).or_default().push(a.posterior);
                }
                for (_, posts) in by_src {
                    let h: f64 = posts
                        .iter()
                        .filter(|p| **p > 0.0)
                        .map(|p| -p * p.ln())
                        .sum();
                    total += h;
                    nodes += 1;
                }
            }
            total / nodes as f64
        };
        let h_intended = mean_entropy(ClassLabel::Intended, 20.0, &mut rng);
        let h_unintended = mean_entropy(ClassLabel::Unintended, 0.0, &mut rng);
        assert!(
            h_unintended > h_intended,
            "entropy intended {h_intended} vs unintended {h_unintended}"
        );
    }

    #[test]
    fn intended_best_path_keeps_most_mass() {
        // max-product path posterior mass, in expectation, for clean
        // intended utterances
        let params = LatticeParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut total = 0.0;
        let n = 1000;
        for _ in 0..n {
            let lat = synth_lattice(ClassLabel::Intended, 25.0, &params, &mut rng);
            let mut best = vec![f64::NEG_INFINITY; lat.node_count];
            best[0] = 0.0;
            for a in &lat.arcs {
                let cand = best[a.src] + a.posterior.max(1e-12).ln();
                if cand > best[a.dst] {
                    best[a.dst] = cand;
                }
            }
            total += best[lat.node_count - 1].exp();
        }
        let mean = total / n as f64;
        assert!(mean >= 0.8, "mean best-path mass {mean}");
    }

    #[test]
    fn clean_intended_maps_to_not_background() {
        let config = CorpusConfig::dev_profile(1, 0);
        let p = intent_nb_probability(ClassLabel::Intended, 30.0, &config.intent);
        assert!(p >= 0.98, "p = {p}");
        let pt = CorpusConfig::test_profile(1, 0);
        let p = intent_nb_probability(ClassLabel::Intended, 30.0, &pt.intent);
        assert!(p >= 0.98, "p = {p}");
    }

    #[test]
    fn intent_simulation_is_deterministic() {
        let config = CorpusConfig::default();
        let mut a = utterance_rng(9, 4, RngChannel::Intent);
        let mut b = utterance_rng(9, 4, RngChannel::Intent);
        for snr in [-5.0, 8.0, 22.0] {
            assert_eq!(
                simulate_intent_classifier(ClassLabel::Unintended, snr, &config.intent, &mut a),
                simulate_intent_classifier(ClassLabel::Unintended, snr, &config.intent, &mut b)
            );
        }
    }
}
