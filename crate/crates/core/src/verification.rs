//! Speaker-verification trials, cosine scoring, ROC-AUC and EER.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::cosine_similarity;
use crate::data::{Attribute, Demographics};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// A speaker and their utterance ids, as input to trial construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSpeaker {
    pub speaker_id: String,
    pub utterances: Vec<String>,
    pub demographics: Option<Demographics>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrialPair {
    pub utt_a: String,
    pub utt_b: String,
    pub is_genuine: bool,
    /// Demographics of the speaker of `utt_a`.
    pub tags: Option<Demographics>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialConfig {
    /// Genuine pairs kept per speaker; `None` keeps all of them.
    pub genuine_cap: Option<usize>,
    pub impostor_ratio: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            genuine_cap: Some(10),
            impostor_ratio: 1.0,
        }
    }
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Genuine pairs: every within-speaker pair, subsampled to the cap.
/// Impostor pairs: two distinct speakers drawn uniformly, one utterance
/// each, without repeating a pair. Deterministic per seed.
pub fn build_trials(
    speakers: &[TrialSpeaker],
    cfg: &TrialConfig,
    seed: u64,
) -> Result<Vec<TrialPair>> {
    if speakers.len() < 2 {
        return Err(Error::TooFewSpeakers);
    }
    if let Some(s) = speakers.iter().find(|s| s.utterances.len() < 2) {
        return Err(Error::Config(format!(
            "speaker `{}` has fewer than two utterances",
            s.speaker_id
        )));
    }
    if !(cfg.impostor_ratio >= 0.0) {
        return Err(Error::Config(format!(
            "impostor ratio must be >= 0, got {}",
            cfg.impostor_ratio
        )));
    }
    let mut rng = stream_rng(seed, stream::TRIALS);
    let mut trials = Vec::new();
    let mut seen = HashSet::new();
    for s in speakers {
        let n = s.utterances.len();
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        let keep: Vec<(usize, usize)> = match cfg.genuine_cap {
            Some(cap) if all.len() > cap => {
                let mut idx = sample(&mut rng, all.len(), cap).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| all[i]).collect()
            }
            _ => all,
        };
        for (i, j) in keep {
            let (a, b) = (&s.utterances[i], &s.utterances[j]);
            if a == b || !seen.insert(pair_key(a, b)) {
                continue;
            }
            trials.push(TrialPair {
                utt_a: a.clone(),
                utt_b: b.clone(),
                is_genuine: true,
                tags: s.demographics,
            });
        }
    }
    let genuine = trials.len();
    let total_utts: usize = speakers.iter().map(|s| s.utterances.len()).sum();
    let cross_pairs: usize = speakers
        .iter()
        .map(|s| s.utterances.len() * (total_utts - s.utterances.len()))
        .sum::<usize>()
        / 2;
    let wanted = ((cfg.impostor_ratio * genuine as f64).round() as usize).min(cross_pairs);
    let mut impostors = 0;
    while impostors < wanted {
        let sa = rng.gen_range(0..speakers.len());
        let mut sb = rng.gen_range(0..speakers.len() - 1);
        if sb >= sa {
            sb += 1;
        }
        let (spa, spb) = (&speakers[sa], &speakers[sb]);
        let a = &spa.utterances[rng.gen_range(0..spa.utterances.len())];
        let b = &spb.utterances[rng.gen_range(0..spb.utterances.len())];
        if a == b || !seen.insert(pair_key(a, b)) {
            continue;
        }
        trials.push(TrialPair {
            utt_a: a.clone(),
            utt_b: b.clone(),
            is_genuine: false,
            tags: spa.demographics,
        });
        impostors += 1;
    }
    Ok(trials)
}

fn label_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let genuine = labels.iter().filter(|&&g| g).count();
    let impostor = labels.len() - genuine;
    if genuine == 0 || impostor == 0 {
        return Err(Error::SingleLabel);
    }
    Ok((genuine, impostor))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "verification scores",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("verification scores"));
    }
    Ok(())
}

/// Groups of equal scores in ascending order, as (genuine, impostor) counts.
fn tied_groups(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let (g, m) = if labels[i] { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            Some(last) if last.0 == scores[i] => {
                last.1 += g;
                last.2 += m;
            }
            _ => groups.push((scores[i], g, m)),
        }
    }
    groups
}

/// Mann-Whitney AUC: P(genuine > impostor) + ½ P(tie).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (genuine, impostor) = label_counts(labels)?;
    // Twice the pair-count numerator, kept in integers so the result is exact.
    let mut twice_wins: u128 = 0;
    let mut impostors_below: u128 = 0;
    for (_, g, m) in tied_groups(scores, labels) {
        twice_wins += 2 * g as u128 * impostors_below + g as u128 * m as u128;
        impostors_below += m as u128;
    }
    Ok(twice_wins as f64 / (2 * genuine as u128 * impostor as u128) as f64)
}

/// Equal error rate with acceptance at `score >= t`.
///
/// Thresholds run over the distinct scores plus one above the maximum
/// (where everything is rejected). FAR − FRR is non-increasing along the
/// sweep; the EER is the common value at an exact tie, otherwise the linear
/// interpolation between the two points around the sign change.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (genuine, impostor) = label_counts(labels)?;
    let groups = tied_groups(scores, labels);
    // Counts at threshold = group k's score: impostors accepted are those
    // at or above it, genuines rejected those strictly below.
    let mut points = Vec::with_capacity(groups.len() + 1);
    let mut gen_below = 0usize;
    let mut imp_at_or_above = impostor;
    for &(_, g, m) in &groups {
        points.push((imp_at_or_above, gen_below));
        gen_below += g;
        imp_at_or_above -= m;
    }
    points.push((0, genuine));
    let far = |p: (usize, usize)| p.0 as f64 / impostor as f64;
    let frr = |p: (usize, usize)| p.1 as f64 / genuine as f64;
    let mut prev = points[0];
    for &p in &points {
        // Sign of FAR − FRR via exact integer cross-multiplication.
        let lhs = p.0 as u128 * genuine as u128;
        let rhs = p.1 as u128 * impostor as u128;
        if lhs == rhs {
            return Ok(far(p));
        }
        if lhs < rhs {
            let d0 = far(prev) - frr(prev);
            let d1 = far(p) - frr(p);
            let alpha = d0 / (d0 - d1);
            return Ok(far(prev) + alpha * (far(p) - far(prev)));
        }
        prev = p;
    }
    unreachable!("the final point always has FAR < FRR")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationReport {
    pub roc_auc: f64,
    pub eer: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

pub fn verification_report(scores: &[f64], labels: &[bool]) -> Result<VerificationReport> {
    let (n_genuine, n_impostor) = label_counts(labels)?;
    Ok(VerificationReport {
        roc_auc: roc_auc(scores, labels)?,
        eer: eer(scores, labels)?,
        n_genuine,
        n_impostor,
    })
}

/// Cosine score per trial, looking utterances up by id.
pub fn score_trials(
    trials: &[TrialPair],
    embedding: impl Fn(&str) -> Option<Vec<f64>>,
) -> Result<Vec<f64>> {
    trials
        .iter()
        .map(|t| {
            let a = embedding(&t.utt_a).ok_or_else(|| Error::MissingLabel(t.utt_a.clone()))?;
            let b = embedding(&t.utt_b).ok_or_else(|| Error::MissingLabel(t.utt_b.clone()))?;
            cosine_similarity(&a, &b)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgroupReport {
    pub attribute: Attribute,
    pub group: &'static str,
    /// `None` when the group lacks genuine or impostor trials.
    pub report: Option<VerificationReport>,
}

/// Partitions trials by the tag of speaker a and reports each group in
/// label order. Untagged trials are ignored.
pub fn subgroup_report(
    trials: &[TrialPair],
    scores: &[f64],
    attribute: Attribute,
) -> Result<Vec<SubgroupReport>> {
    if trials.len() != scores.len() {
        return Err(Error::Shape {
            op: "subgroup_report",
            left: vec![trials.len()],
            right: vec![scores.len()],
        });
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for (t, &s) in trials.iter().zip(scores) {
        if let Some(d) = t.tags {
            let entry = groups.entry(d.class_ids()[attribute.index()]).or_default();
            entry.0.push(s);
            entry.1.push(t.is_genuine);
        }
    }
    (0..attribute.num_classes())
        .map(|c| {
            let report = match groups.get(&c) {
                Some((s, l)) if label_counts(l).is_ok() => Some(verification_report(s, l)?),
                _ => None,
            };
            Ok(SubgroupReport {
                attribute,
                group: attribute.class_name(c),
                report,
            })
        })
        .collect()
}

pub const TRIALS_CSV_HEADER: &str = "utt_a,utt_b,is_genuine,gender,age_group,accent_group";

pub fn trials_to_csv(trials: &[TrialPair]) -> String {
    let mut out = format!("{TRIALS_CSV_HEADER}\n");
    for t in trials {
        let tag = |a: Attribute| t.tags.map_or("", |d| d.class_name(a));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            t.utt_a,
            t.utt_b,
            u8::from(t.is_genuine),
            tag(Attribute::Gender),
            tag(Attribute::Age),
            tag(Attribute::Accent)
        );
    }
    out
}

pub fn trials_from_csv(text: &str) -> Result<Vec<TrialPair>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRIALS_CSV_HEADER => {}
        _ => {
            return Err(Error::MalformedRow {
                line: 1,
                reason: format!("expected header `{TRIALS_CSV_HEADER}`"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |reason: &str| Error::MalformedRow {
                line: i + 1,
                reason: reason.to_string(),
            };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            let is_genuine = match cells[2] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("is_genuine must be 0 or 1")),
            };
            let tags = if cells[3..].iter().all(|c| c.is_empty()) {
                None
            } else {
                let ids = [Attribute::Gender, Attribute::Age, Attribute::Accent]
                    .map(|a| a.parse_class(cells[3 + a.index()]));
                match ids {
                    [Some(g), Some(a), Some(c)] => Demographics::from_class_ids([g, a, c]),
                    _ => return Err(bad("unknown demographic tag")),
                }
            };
            Ok(TrialPair {
                utt_a: cells[0].to_string(),
                utt_b: cells[1].to_string(),
                is_genuine,
                tags,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speakers(n: usize, utts: usize) -> Vec<TrialSpeaker> {
        (0..n)
            .map(|s| TrialSpeaker {
                speaker_id: format!("s{s}"),
                utterances: (0..utts).map(|u| format!("s{s}_u{u}")).collect(),
                demographics: None,
            })
            .collect()
    }

    #[test]
    fn two_by_two_enumeration() {
        let cfg = TrialConfig {
            genuine_cap: None,
            impostor_ratio: 1.0,
        };
        let t = build_trials(&speakers(2, 2), &cfg, 0).unwrap();
        assert_eq!(t.iter().filter(|p| p.is_genuine).count(), 2);
        assert_eq!(t.iter().filter(|p| !p.is_genuine).count(), 2);
    }

    #[test]
    fn one_speaker_is_an_error() {
        assert!(matches!(
            build_trials(&speakers(1, 3), &TrialConfig::default(), 0),
            Err(Error::TooFewSpeakers)
        ));
    }

    #[test]
    fn fifty_by_three_counts_and_uniqueness() {
        let sp = speakers(50, 3);
        let t = build_trials(&sp, &TrialConfig::default(), 4).unwrap();
        assert_eq!(t.iter().filter(|p| p.is_genuine).count(), 150);
        assert_eq!(t.iter().filter(|p| !p.is_genuine).count(), 150);
        let keys: HashSet<_> = t.iter().map(|p| pair_key(&p.utt_a, &p.utt_b)).collect();
        assert_eq!(keys.len(), 300);
        let speaker = |u: &str| u.split('_').next().unwrap().to_string();
        assert!(t
            .iter()
            .all(|p| p.is_genuine == (speaker(&p.utt_a) == speaker(&p.utt_b))));
        assert_eq!(t, build_trials(&sp, &TrialConfig::default(), 4).unwrap());
    }

    #[test]
    fn cap_limits_genuine_pairs() {
        let t = build_trials(&speakers(3, 6), &TrialConfig::default(), 1).unwrap();
        assert_eq!(t.iter().filter(|p| p.is_genuine).count(), 30);
    }

    #[test]
    fn auc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::SingleLabel)
        ));
    }

    #[test]
    fn eer_examples() {
        let labels = [true, true, false, false];
        assert_eq!(eer(&[0.9, 0.8, 0.1, 0.2], &labels).unwrap(), 0.0);
        assert_eq!(eer(&[0.6, 0.2, 0.8, 0.4], &labels).unwrap(), 0.5);
        assert!(eer(&[0.5], &[false]).is_err());
    }

    #[test]
    fn eer_interpolates_between_points() {
        // Points: (1,0) → (2/3,0) → (1/3,0) → (1/3,1) → (0,1); the sign flips
        // between (1/3,0) and (1/3,1), crossing at 1/3.
        let scores = [0.1, 0.2, 0.3, 0.4];
        let labels = [false, false, true, false];
        assert!((eer(&scores, &labels).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn subgroup_single_group_equals_overall() {
        let demo = Demographics::from_class_ids([0, 1, 2]);
        let trials: Vec<TrialPair> = (0..6)
            .map(|i| TrialPair {
                utt_a: format!("a{i}"),
                utt_b: format!("b{i}"),
                is_genuine: i % 2 == 0,
                tags: demo,
            })
            .collect();
        let scores = [0.9, 0.3, 0.5, 0.6, 0.7, 0.1];
        let labels: Vec<bool> = trials.iter().map(|t| t.is_genuine).collect();
        let overall = verification_report(&scores, &labels).unwrap();
        let groups = subgroup_report(&trials, &scores, Attribute::Gender).unwrap();
        assert_eq!(groups[0].report, Some(overall));
        assert_eq!(groups[1].report, None);
    }

    #[test]
    fn trials_csv_round_trip() {
        let mut sp = speakers(3, 3);
        sp[0].demographics = Demographics::from_class_ids([1, 2, 4]);
        let t = build_trials(&sp, &TrialConfig::default(), 2).unwrap();
        assert_eq!(trials_from_csv(&trials_to_csv(&t)).unwrap(), t);
    }
}
