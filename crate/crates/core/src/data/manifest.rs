//! Manifest ingestion and demographic label normalization.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use super::labels::{AccentGroup, AgeGroup, Demographics, Gender};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub audio_path: String,
    pub raw_gender: String,
    pub raw_age: String,
    pub raw_accent: String,
}

pub const REQUIRED_COLUMNS: [&str; 5] = ["client_id", "path", "gender", "age", "accents"];

/// Parses a tab-separated manifest with a header row. Columns are located by
/// name; cells missing at the end of a row read as empty strings.
pub fn parse_manifest<R: BufRead>(input: R) -> Result<Vec<UtteranceRecord>> {
    let mut lines = input.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io("<manifest>", e))?,
        None => return Err(Error::MissingColumn(REQUIRED_COLUMNS[0].into())),
    };
    let columns: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = columns
            .iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.into()))?;
    }
    let [speaker_col, path_col, gender_col, age_col, accent_col] = idx;

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() > columns.len() {
            return Err(Error::MalformedRow {
                line: line_no,
                reason: format!("{} cells for {} columns", cells.len(), columns.len()),
            });
        }
        let cell = |c: usize| cells.get(c).map_or("", |s| s.trim()).to_string();
        let path = cell(path_col);
        let speaker = cell(speaker_col);
        if path.is_empty() || speaker.is_empty() {
            return Err(Error::MalformedRow {
                line: line_no,
                reason: "empty client_id or path".into(),
            });
        }
        if let Some(first) = seen.insert(path.clone(), line_no) {
            return Err(Error::MalformedRow {
                line: line_no,
                reason: format!("duplicate utterance `{path}` (first on line {first})"),
            });
        }
        records.push(UtteranceRecord {
            utterance_id: path.clone(),
            speaker_id: speaker,
            audio_path: path,
            raw_gender: cell(gender_col),
            raw_age: cell(age_col),
            raw_accent: cell(accent_col),
        });
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExclusionReason {
    GenderOutOfScope,
    AgeMissing,
    AgeUnrecognized,
    AccentOutOfScope,
    ConflictingMetadata,
    TooFewUtterances,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::GenderOutOfScope => "gender_out_of_scope",
            ExclusionReason::AgeMissing => "age_missing",
            ExclusionReason::AgeUnrecognized => "age_unrecognized",
            ExclusionReason::AccentOutOfScope => "accent_out_of_scope",
            ExclusionReason::ConflictingMetadata => "conflicting_metadata",
            ExclusionReason::TooFewUtterances => "too_few_utterances",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        use ExclusionReason::*;
        [
            GenderOutOfScope,
            AgeMissing,
            AgeUnrecognized,
            AccentOutOfScope,
            ConflictingMetadata,
            TooFewUtterances,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a dataset spells its age field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgeSchema {
    /// Common Voice style: `teens`, `twenties`, …
    DecadeLabels,
    /// Year ranges such as `17-28` or `55-100`.
    YearRanges,
}

impl AgeSchema {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "decade_labels" => Some(AgeSchema::DecadeLabels),
            "year_ranges" => Some(AgeSchema::YearRanges),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeSchema::DecadeLabels => "decade_labels",
            AgeSchema::YearRanges => "year_ranges",
        }
    }
}

pub fn map_gender(raw: &str) -> Result<Gender, ExclusionReason> {
    match raw.trim().to_lowercase().as_str() {
        "male_masculine" | "male" => Ok(Gender::Male),
        "female_feminine" | "female" => Ok(Gender::Female),
        _ => Err(ExclusionReason::GenderOutOfScope),
    }
}

const YOUNG_YEARS: (u32, u32) = (9, 28);
const ADULT_YEARS: (u32, u32) = (29, 54);
const SENIOR_YEARS: (u32, u32) = (55, 100);

fn year_range_group(lo: u32, hi: u32) -> Option<AgeGroup> {
    [
        (YOUNG_YEARS, AgeGroup::Young),
        (ADULT_YEARS, AgeGroup::Adult),
        (SENIOR_YEARS, AgeGroup::Senior),
    ]
    .into_iter()
    .find(|&((a, b), _)| lo >= a && hi <= b && lo <= hi)
    .map(|(_, g)| g)
}

pub fn map_age_group(raw: &str, schema: AgeSchema) -> Result<AgeGroup, ExclusionReason> {
    let text = raw.trim().to_lowercase();
    if text.is_empty() {
        return Err(ExclusionReason::AgeMissing);
    }
    match schema {
        AgeSchema::DecadeLabels => match text.as_str() {
            "teens" | "twenties" => Ok(AgeGroup::Young),
            "thirties" | "fourties" | "forties" | "fifties" => Ok(AgeGroup::Adult),
            "sixties" | "seventies" | "eighties" | "nineties" => Ok(AgeGroup::Senior),
            _ => Err(ExclusionReason::AgeUnrecognized),
        },
        AgeSchema::YearRanges => {
            let parse = |s: &str| s.trim().parse::<u32>().ok();
            let bounds = if let Some(lo) = text.strip_suffix('+') {
                parse(lo).map(|lo| (lo, SENIOR_YEARS.1.max(lo)))
            } else if let Some((lo, hi)) = text.split_once('-') {
                parse(lo).zip(parse(hi))
            } else {
                parse(&text).map(|y| (y, y))
            };
            bounds
                .and_then(|(lo, hi)| year_range_group(lo, hi))
                .ok_or(ExclusionReason::AgeUnrecognized)
        }
    }
}

/// Keyword table for free-text accents, checked in order within each
/// comma-separated segment.
const ACCENT_KEYWORDS: &[(&str, AccentGroup)] = &[
    ("united states", AccentGroup::Usa),
    ("us english", AccentGroup::Usa),
    ("american", AccentGroup::Usa),
    ("usa", AccentGroup::Usa),
    ("england", AccentGroup::England),
    ("canad", AccentGroup::Canada),
    ("australia", AccentGroup::AustraliaNz),
    ("new zealand", AccentGroup::AustraliaNz),
    ("india", AccentGroup::IndiaSeAsia),
    ("south asia", AccentGroup::IndiaSeAsia),
    ("south-east asia", AccentGroup::IndiaSeAsia),
    ("southeast asia", AccentGroup::IndiaSeAsia),
    ("pakistan", AccentGroup::IndiaSeAsia),
    ("sri lanka", AccentGroup::IndiaSeAsia),
    ("bangladesh", AccentGroup::IndiaSeAsia),
    ("singapore", AccentGroup::IndiaSeAsia),
    ("malaysia", AccentGroup::IndiaSeAsia),
    ("asian", AccentGroup::IndiaSeAsia),
];

/// Maps free-text accents to one of the five groups. For comma-joined
/// entries the first segment that matches wins.
pub fn map_accent(raw: &str) -> Result<AccentGroup, ExclusionReason> {
    let text = raw.to_lowercase();
    let segments: Vec<&str> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    for (i, segment) in segments.iter().enumerate() {
        if let Some(&(_, group)) = ACCENT_KEYWORDS.iter().find(|(k, _)| segment.contains(k)) {
            if segments.len() > 1 {
                log::debug!("multi-accent entry `{raw}` resolved by segment {i} to {group}");
            }
            return Ok(group);
        }
    }
    Err(ExclusionReason::AccentOutOfScope)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub demographics: Demographics,
    pub utterance_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exclusion {
    pub speaker_id: String,
    pub reason: ExclusionReason,
}

#[derive(Clone, Debug, Default)]
pub struct Normalized {
    pub speakers: Vec<SpeakerRecord>,
    pub exclusions: Vec<Exclusion>,
}

/// Groups utterances by speaker (first-appearance order) and keeps only
/// speakers whose labels all normalize and who have at least two
/// utterances. Every dropped speaker gets one exclusion entry.
pub fn normalize_speakers(records: &[UtteranceRecord], schema: AgeSchema) -> Normalized {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&UtteranceRecord>> = HashMap::new();
    for r in records {
        groups
            .entry(r.speaker_id.as_str())
            .or_insert_with(|| {
                order.push(r.speaker_id.as_str());
                Vec::new()
            })
            .push(r);
    }

    let mut out = Normalized::default();
    for speaker in order {
        let utts = &groups[speaker];
        match normalize_one(utts, schema) {
            Ok(demographics) => out.speakers.push(SpeakerRecord {
                speaker_id: speaker.to_string(),
                demographics,
                utterance_ids: utts.iter().map(|u| u.utterance_id.clone()).collect(),
            }),
            Err(reason) => out.exclusions.push(Exclusion {
                speaker_id: speaker.to_string(),
                reason,
            }),
        }
    }
    out
}

fn normalize_one(
    utts: &[&UtteranceRecord],
    schema: AgeSchema,
) -> Result<Demographics, ExclusionReason> {
    let key = |u: &UtteranceRecord| {
        (
            u.raw_gender.trim().to_lowercase(),
            u.raw_age.trim().to_lowercase(),
            u.raw_accent.trim().to_lowercase(),
        )
    };
    let first = key(utts[0]);
    if utts.iter().any(|u| key(u) != first) {
        return Err(ExclusionReason::ConflictingMetadata);
    }
    let u = utts[0];
    let demographics = Demographics {
        gender: map_gender(&u.raw_gender)?,
        age: map_age_group(&u.raw_age, schema)?,
        accent: map_accent(&u.raw_accent)?,
    };
    if utts.len() < 2 {
        return Err(ExclusionReason::TooFewUtterances);
    }
    Ok(demographics)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "client_id\tpath\tsentence\tup_votes\tage\tgender\taccents";

    fn rec(speaker: &str, path: &str, gender: &str, age: &str, accent: &str) -> UtteranceRecord {
        UtteranceRecord {
            utterance_id: path.into(),
            speaker_id: speaker.into(),
            audio_path: path.into(),
            raw_gender: gender.into(),
            raw_age: age.into(),
            raw_accent: accent.into(),
        }
    }

    #[test]
    fn header_only_gives_no_records() {
        assert!(parse_manifest(HEADER.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn fields_map_by_header_name() {
        let text = format!(
            "{HEADER}\n\
             s1\ta.mp3\thello\t2\ttwenties\tmale_masculine\tUnited States English\n\
             s1\tb.mp3\tworld\t3\ttwenties\tmale_masculine\tUnited States English\n\
             s2\tc.mp3\thi\t1\tfifties\tfemale_feminine\tEngland English\n"
        );
        let recs = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs[2],
            rec(
                "s2",
                "c.mp3",
                "female_feminine",
                "fifties",
                "England English"
            )
        );
    }

    #[test]
    fn missing_trailing_cell_reads_empty() {
        let text = format!("{HEADER}\ns1\ta.mp3\thello\t2\ttwenties\tmale_masculine\n");
        let recs = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(recs[0].raw_accent, "");
        assert_eq!(recs[0].raw_gender, "male_masculine");
    }

    #[test]
    fn missing_column_is_named() {
        let err = parse_manifest("client_id\tpath\tage\tgender\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "accents"));
    }

    #[test]
    fn extra_cells_report_line_number() {
        let text = format!(
            "{HEADER}\ns1\ta\tx\t1\tteens\tmale\tusa\n\ns1\tb\tx\t1\tteens\tmale\tusa\textra\n"
        );
        match parse_manifest(text.as_bytes()).unwrap_err() {
            Error::MalformedRow { line, .. } => assert_eq!(line, 4),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn gender_mapping() {
        assert_eq!(map_gender("male_masculine"), Ok(Gender::Male));
        assert_eq!(map_gender("female_feminine"), Ok(Gender::Female));
        assert_eq!(
            map_gender("non-binary"),
            Err(ExclusionReason::GenderOutOfScope)
        );
        assert_eq!(map_gender(""), Err(ExclusionReason::GenderOutOfScope));
    }

    #[test]
    fn age_mapping() {
        use AgeSchema::*;
        assert_eq!(map_age_group("17-28", YearRanges), Ok(AgeGroup::Young));
        assert_eq!(map_age_group("9-16", YearRanges), Ok(AgeGroup::Young));
        assert_eq!(map_age_group("29-41", YearRanges), Ok(AgeGroup::Adult));
        assert_eq!(map_age_group("42-54", YearRanges), Ok(AgeGroup::Adult));
        assert_eq!(map_age_group("55-100", YearRanges), Ok(AgeGroup::Senior));
        assert_eq!(
            map_age_group("20-40", YearRanges),
            Err(ExclusionReason::AgeUnrecognized)
        );
        assert_eq!(map_age_group("fourties", DecadeLabels), Ok(AgeGroup::Adult));
        assert_eq!(map_age_group("teens", DecadeLabels), Ok(AgeGroup::Young));
        assert_eq!(
            map_age_group("seventies", DecadeLabels),
            Ok(AgeGroup::Senior)
        );
        assert_eq!(
            map_age_group("", DecadeLabels),
            Err(ExclusionReason::AgeMissing)
        );
        assert_eq!(
            map_age_group("old", DecadeLabels),
            Err(ExclusionReason::AgeUnrecognized)
        );
    }

    #[test]
    fn accent_mapping() {
        assert_eq!(map_accent("United States English"), Ok(AccentGroup::Usa));
        assert_eq!(
            map_accent("India and South Asia (India, Pakistan, Sri Lanka)"),
            Ok(AccentGroup::IndiaSeAsia)
        );
        assert_eq!(map_accent("Canadian English"), Ok(AccentGroup::Canada));
        assert_eq!(
            map_accent("New Zealand English"),
            Ok(AccentGroup::AustraliaNz)
        );
        assert_eq!(
            map_accent("Scottish English"),
            Err(ExclusionReason::AccentOutOfScope)
        );
        // First matching segment wins.
        assert_eq!(
            map_accent("England English,United States English"),
            Ok(AccentGroup::England)
        );
        assert_eq!(
            map_accent("Scottish English, Australian English"),
            Ok(AccentGroup::AustraliaNz)
        );
    }

    #[test]
    fn normalization_excludes_with_reasons() {
        let us = "United States English";
        let records = vec![
            rec("ok", "1", "male_masculine", "twenties", us),
            rec("ok", "2", "male_masculine", "twenties", us),
            rec("nb", "3", "non-binary", "twenties", us),
            rec("nb", "4", "non-binary", "twenties", us),
            rec("one", "5", "female_feminine", "thirties", us),
            rec("mix", "6", "female_feminine", "thirties", us),
            rec("mix", "7", "female_feminine", "forties", us),
            rec("noage", "8", "male_masculine", "", us),
            rec("noage", "9", "male_masculine", "", us),
        ];
        let out = normalize_speakers(&records, AgeSchema::DecadeLabels);
        assert_eq!(out.speakers.len(), 1);
        assert_eq!(out.speakers[0].speaker_id, "ok");
        assert_eq!(out.speakers[0].demographics.gender, Gender::Male);
        let reasons: Vec<(&str, ExclusionReason)> = out
            .exclusions
            .iter()
            .map(|e| (e.speaker_id.as_str(), e.reason))
            .collect();
        assert_eq!(
            reasons,
            vec![
                ("nb", ExclusionReason::GenderOutOfScope),
                ("one", ExclusionReason::TooFewUtterances),
                ("mix", ExclusionReason::ConflictingMetadata),
                ("noage", ExclusionReason::AgeMissing),
            ]
        );
    }
}
