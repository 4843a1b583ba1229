//! Manifest ingestion, demographic normalization, speaker splits, and
//! synthetic planted-signal datasets.

mod labels;
mod manifest;
mod split;
mod synth;

pub use labels::{AccentGroup, AgeGroup, Attribute, Demographics, Gender, CLASS_COUNTS};
pub use manifest::{
    map_accent, map_age_group, map_gender, normalize_speakers, parse_manifest, AgeSchema,
    Exclusion, ExclusionReason, Normalized, SpeakerRecord, UtteranceRecord, REQUIRED_COLUMNS,
};
pub use split::{
    demographic_summary, format_summary, split_sizes, split_speakers, Split, SplitAssignment,
    SummaryRow,
};
pub use synth::{synth_generate, SynthConfig, SynthDataset, SynthSpeaker, SynthUtterance};

/// Inverse class frequency, normalized to mean 1 over the classes present.
/// Absent classes get weight 1.
pub fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y < classes {
            counts[y] += 1;
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return vec![1.0; classes];
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
        .collect();
    let mean = present.iter().map(|&c| raw[c]).sum::<f64>() / present.len() as f64;
    raw.iter()
        .zip(&counts)
        .map(|(w, &c)| if c > 0 { w / mean } else { 1.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_weights_have_unit_mean() {
        let w = inverse_frequency_weights(&[0, 0, 0, 1], 2);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 1.5).abs() < 1e-12);
        let w = inverse_frequency_weights(&[0, 0, 2], 3);
        assert_eq!(w[1], 1.0);
        assert!(((w[0] + w[2]) / 2.0 - 1.0).abs() < 1e-12);
    }
}
