use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;

use super::labels::{AccentGroup, AgeGroup, Attribute, Demographics, Gender};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, speaker: &str) -> Option<Split> {
        self.assignment.get(speaker).copied()
    }

    pub fn speakers_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(k, _)| k.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|s| **s == split).count()
    }
}

/// Split sizes by largest-remainder rounding; remainder ties go to the
/// earlier split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Random speaker-level partition into train/val/test.
pub fn split_speakers<'a>(
    speakers: impl IntoIterator<Item = &'a str>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let mut ids: Vec<&str> = speakers.into_iter().collect();
    if ids.len() < 10 {
        return Err(Error::TooFewSamples("split_speakers (>= 10 speakers)"));
    }
    let sizes = split_sizes(ids.len(), ratios);
    ids.shuffle(&mut stream_rng(seed, stream::SPLIT));
    let mut assignment = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        for id in it.by_ref().take(size) {
            if assignment.insert(id.to_string(), split).is_some() {
                return Err(Error::Config(format!("duplicate speaker id `{id}`")));
            }
        }
    }
    Ok(SplitAssignment { assignment })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub attribute: Attribute,
    pub category: &'static str,
    pub speakers: usize,
    pub percent: f64,
}

/// Speaker counts and percentages per category, in label order, omitting
/// empty categories.
pub fn demographic_summary(speakers: &[Demographics]) -> Vec<SummaryRow> {
    let total = speakers.len();
    if total == 0 {
        return Vec::new();
    }
    let mut rows = Vec::new();
    let mut push = |attribute, category, count: usize| {
        if count > 0 {
            rows.push(SummaryRow {
                attribute,
                category,
                speakers: count,
                percent: 100.0 * count as f64 / total as f64,
            });
        }
    };
    for g in Gender::ALL {
        push(
            Attribute::Gender,
            g.name(),
            speakers.iter().filter(|d| d.gender == *g).count(),
        );
    }
    for a in AgeGroup::ALL {
        push(
            Attribute::Age,
            a.name(),
            speakers.iter().filter(|d| d.age == *a).count(),
        );
    }
    for a in AccentGroup::ALL {
        push(
            Attribute::Accent,
            a.name(),
            speakers.iter().filter(|d| d.accent == *a).count(),
        );
    }
    rows
}

/// Plain-text rendering in the layout of a demographics table.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<20} {:>9} {:>12}\n",
        "Category", "Speakers", "Percent (%)"
    );
    let mut current = None;
    for r in rows {
        if current != Some(r.attribute) {
            out.push_str(&format!("{}\n", r.attribute));
            current = Some(r.attribute);
        }
        out.push_str(&format!(
            "  {:<18} {:>9} {:>12.2}\n",
            r.category, r.speakers, r.percent
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("spk{i:05}")).collect()
    }

    #[test]
    fn sizes_small_and_large() {
        assert_eq!(split_sizes(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(split_sizes(11_209, [0.8, 0.1, 0.1]), [8967, 1121, 1121]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let names = ids(37);
        let a = split_speakers(names.iter().map(String::as_str), [0.8, 0.1, 0.1], 5).unwrap();
        let b = split_speakers(names.iter().map(String::as_str), [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.assignment.len(), 37);
        let sizes = split_sizes(37, [0.8, 0.1, 0.1]);
        for (s, n) in Split::ALL.into_iter().zip(sizes) {
            assert_eq!(a.count(s), n);
        }
        let c = split_speakers(names.iter().map(String::as_str), [0.8, 0.1, 0.1], 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_ratios_and_too_few() {
        let names = ids(20);
        assert!(split_speakers(names.iter().map(String::as_str), [0.8, 0.1, 0.2], 0).is_err());
        let few = ids(9);
        assert!(split_speakers(few.iter().map(String::as_str), [0.8, 0.1, 0.1], 0).is_err());
    }

    fn demo(g: Gender) -> Demographics {
        Demographics {
            gender: g,
            age: AgeGroup::Adult,
            accent: AccentGroup::Usa,
        }
    }

    #[test]
    fn summary_percentages() {
        let mut people = vec![demo(Gender::Male); 8];
        people.extend(vec![demo(Gender::Female); 2]);
        let rows = demographic_summary(&people);
        assert_eq!(rows[0].category, "Male");
        assert_eq!(rows[0].percent, 80.0);
        assert_eq!(rows[1].percent, 20.0);
        assert!(demographic_summary(&[]).is_empty());
    }

    #[test]
    fn summary_matches_reported_gender_split() {
        let mut people = vec![demo(Gender::Male); 8968];
        people.extend(vec![demo(Gender::Female); 2241]);
        let rows = demographic_summary(&people);
        assert_eq!(format!("{:.2}", rows[0].percent), "80.01");
        assert_eq!(format!("{:.2}", rows[1].percent), "19.99");
        assert!(format_summary(&rows).contains("80.01"));
    }
}
