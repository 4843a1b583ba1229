use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dseb::audio::{crop_or_pad, mvn_normalize, LogMelSpectrogram, Waveform};
use dseb::autodiff::{cosine_similarity, Tape, Tensor};
use dseb::contrastive::nt_xent;
use dseb::data::{
    normalize_speakers, split_sizes, split_speakers, AgeSchema, Split, UtteranceRecord,
};
use dseb::models::covariance_penalty_value;
use dseb::verification::{eer, roc_auc};

/// Integer-valued scores so ties are common and exact transforms stay exact.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0i32..12, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| {
            l.iter().any(|&b| b) && l.iter().any(|&b| !b)
        })
        .prop_map(|(s, l)| (s.into_iter().map(f64::from).collect(), l))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn unit_rows(t: &Tensor) -> Option<Tensor> {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm > 1e-3).then(|| row.iter().map(|v| v / norm).collect())
        })
        .collect::<Option<_>>()?;
    Some(Tensor::from_rows(&rows).unwrap())
}

fn nt_xent_value(x: &Tensor, temperature: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let loss = nt_xent(&mut tape, v, temperature).unwrap();
    tape.value(loss).item()
}

proptest! {
    #[test]
    fn auc_survives_monotone_maps((scores, labels) in scored_labels()) {
        let mapped: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s - 7.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn negated_scores_flip_auc((scores, labels) in scored_labels()) {
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&negated, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eer_is_a_rate((scores, labels) in scored_labels()) {
        let e = eer(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(
        u in prop::collection::vec(-5.0f64..5.0, 6),
        v in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let a = cosine_similarity(&u, &v).unwrap();
        prop_assert_eq!(a, cosine_similarity(&v, &u).unwrap());
        prop_assert!(a.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn split_is_a_partition(n in 10usize..120, seed in any::<u64>(), a in 1u32..8, b in 0u32..8, c in 1u32..8) {
        let total = f64::from(a + b + c);
        let ratios = [f64::from(a) / total, f64::from(b) / total, 1.0 - f64::from(a + b) / total];
        let ids: Vec<String> = (0..n).map(|i| format!("spk{i}")).collect();
        let split = split_speakers(ids.iter().map(String::as_str), ratios, seed).unwrap();
        let sizes = split_sizes(n, ratios);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        let mut seen = BTreeSet::new();
        for (s, size) in Split::ALL.into_iter().zip(sizes) {
            prop_assert_eq!(split.count(s), size);
            for id in split.speakers_in(s) {
                prop_assert!(seen.insert(id.to_string()));
            }
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn every_speaker_is_kept_or_excluded(
        rows in prop::collection::vec((0usize..15, 0usize..4, 0usize..4, 0usize..4), 1..60),
    ) {
        const GENDERS: [&str; 4] = ["male_masculine", "female", "other", ""];
        const AGES: [&str; 4] = ["twenties", "forties", "", "ancient"];
        const ACCENTS: [&str; 4] = ["United States English", "England English", "Scottish", "india and south asia"];
        let records: Vec<UtteranceRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(s, g, a, c))| UtteranceRecord {
                utterance_id: format!("u{i}"),
                speaker_id: format!("s{s}"),
                audio_path: format!("clips/u{i}.wav"),
                raw_gender: GENDERS[g].into(),
                raw_age: AGES[a].into(),
                raw_accent: ACCENTS[c].into(),
            })
            .collect();
        let distinct: BTreeSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
        let out = normalize_speakers(&records, AgeSchema::DecadeLabels);
        prop_assert_eq!(out.speakers.len() + out.exclusions.len(), distinct.len());
        for kept in &out.speakers {
            prop_assert!(kept.utterance_ids.len() >= 2);
        }
    }

    #[test]
    fn mvn_is_idempotent(frames in matrix(6, 4)) {
        let spec = LogMelSpectrogram { frames, frame_rate: 100.0 };
        let once = mvn_normalize(&spec);
        let twice = mvn_normalize(&once);
        for (a, b) in once.frames.data().iter().zip(twice.frames.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_or_pad_hits_the_target_length(len in 0usize..3000, clip_ms in 1u32..300, seed in any::<u64>()) {
        let wav = Waveform { samples: (0..len).map(|i| i as f64).collect(), sample_rate: 8000 };
        let clip = f64::from(clip_ms) / 1000.0;
        let out = crop_or_pad(&wav, clip, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.len(), (clip * 8000.0).round() as usize);
        prop_assert_eq!(out.sample_rate, 8000);
    }

    #[test]
    fn covariance_ignores_offsets(
        demo in matrix(8, 3),
        residual in matrix(8, 4),
        shift in prop::collection::vec(-10.0f64..10.0, 7),
    ) {
        let shifted = |t: &Tensor, off: &[f64]| {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|r| t.row(r).iter().zip(off).map(|(v, o)| v + o).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let base = covariance_penalty_value(&demo, &residual).unwrap();
        let moved = covariance_penalty_value(&shifted(&demo, &shift[..3]), &shifted(&residual, &shift[3..])).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn nt_xent_ignores_pair_order(raw in matrix(8, 5), rotate in 1usize..4, temperature in 0.1f64..1.0) {
        let x = unit_rows(&raw);
        prop_assume!(x.is_some());
        let x = x.unwrap();
        let pairs: Vec<[Vec<f64>; 2]> = (0..4).map(|p| [x.row(2 * p).to_vec(), x.row(2 * p + 1).to_vec()]).collect();
        let rotated: Vec<Vec<f64>> = (0..4)
            .flat_map(|p| pairs[(p + rotate) % 4].clone())
            .collect();
        let a = nt_xent_value(&x, temperature);
        let b = nt_xent_value(&Tensor::from_rows(&rotated).unwrap(), temperature);
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn nt_xent_stays_within_its_cosine_bounds(raw in matrix(8, 5), temperature in 0.1f64..1.0) {
        // Every row term is ln(1 + sum of exp((s_neg - s_pos) / tau)) over
        // 2N - 2 negatives, and each exponent lies in [-2/tau, 2/tau].
        let x = unit_rows(&raw);
        prop_assume!(x.is_some());
        let loss = nt_xent_value(&x.unwrap(), temperature);
        let negatives = 6.0;
        let lower = (1.0 + negatives * (-2.0 / temperature).exp()).ln();
        let upper = (1.0 + negatives * (2.0 / temperature).exp()).ln();
        prop_assert!(loss >= lower - 1e-9 && loss <= upper + 1e-9, "{lower} <= {loss} <= {upper}");
    }
}
