//! Dataset preparation: normalized speakers, speaker-disjoint splits,
//! verification trials and the optional feature cache, plus loading them
//! back for training and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{DatasetSource, ExperimentConfig};
use crate::audio::read_wav;
use crate::autodiff::{read_checkpoint, write_checkpoint, Tensor};
use crate::data::{
    demographic_summary, format_summary, normalize_speakers, parse_manifest, split_speakers,
    synth_generate, Attribute, Demographics, Exclusion, Split, SplitAssignment, SynthDataset,
};
use crate::error::{Error, Result};
use crate::models::{ModelInput, TrainItem, TrainingSet};
use crate::verification::{build_trials, trials_from_csv, trials_to_csv, TrialPair, TrialSpeaker};

pub const SPEAKERS_FILE: &str = "speakers.tsv";
pub const EXCLUSIONS_FILE: &str = "exclusions.tsv";
pub const SPLITS_FILE: &str = "splits.tsv";
pub const UTTERANCES_FILE: &str = "utterances.tsv";
pub const TRIALS_FILE: &str = "trials_test.csv";
pub const FEATURES_FILE: &str = "features.dseb";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSpeaker {
    pub speaker_id: String,
    pub demographics: Demographics,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedUtterance {
    pub id: String,
    pub speaker: usize,
    /// Audio path relative to the audio root, or `synth:<index>`.
    pub source: String,
}

/// Everything `prepare` produces.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub speakers: Vec<PreparedSpeaker>,
    pub utterances: Vec<PreparedUtterance>,
    pub exclusions: Vec<Exclusion>,
    pub trials: Vec<TrialPair>,
    /// Per-utterance features when the dataset is feature-level synthetic.
    pub features: Option<Vec<Tensor>>,
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn synth_source(index: usize) -> String {
    format!("synth:{index}")
}

/// Builds the prepared dataset in memory.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (records, exclusions, features) = match &cfg.dataset {
        DatasetSource::Synthetic {
            config,
            waveform_seconds,
        } => {
            let synth = synth_generate(config)?;
            let mut speakers: Vec<(String, Demographics, Vec<(String, String)>)> = synth
                .speakers
                .iter()
                .map(|s| (s.id.clone(), s.demographics, Vec::new()))
                .collect();
            for (i, u) in synth.utterances.iter().enumerate() {
                speakers[u.speaker].2.push((u.id.clone(), synth_source(i)));
            }
            let features = match waveform_seconds {
                None => Some(synth.utterances.into_iter().map(|u| u.features).collect()),
                Some(_) => None,
            };
            (speakers, Vec::new(), features)
        }
        DatasetSource::Manifest { path, schema, .. } => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let records = parse_manifest(BufReader::new(file)).map_err(|e| match e {
                Error::MalformedRow { line, reason } => {
                    Error::data(path, format!("line {line}: {reason}"))
                }
                Error::MissingColumn(c) => {
                    Error::data(path, format!("missing required column `{c}`"))
                }
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })?;
            let normalized = normalize_speakers(&records, *schema);
            let by_id: BTreeMap<&str, &str> = records
                .iter()
                .map(|r| (r.utterance_id.as_str(), r.audio_path.as_str()))
                .collect();
            let speakers = normalized
                .speakers
                .iter()
                .map(|s| {
                    let utts = s
                        .utterance_ids
                        .iter()
                        .map(|u| (u.clone(), by_id[u.as_str()].to_string()))
                        .collect();
                    (s.speaker_id.clone(), s.demographics, utts)
                })
                .collect();
            (speakers, normalized.exclusions, None)
        }
    };

    let assignment = split_speakers(
        records.iter().map(|(id, _, _)| id.as_str()),
        cfg.split_ratios,
        cfg.seed,
    )?;
    let mut speakers = Vec::with_capacity(records.len());
    let mut utterances = Vec::new();
    for (index, (speaker_id, demographics, utts)) in records.into_iter().enumerate() {
        let split = assignment
            .split_of(&speaker_id)
            .expect("every speaker is assigned");
        speakers.push(PreparedSpeaker {
            speaker_id,
            demographics,
            split,
        });
        for (id, source) in utts {
            utterances.push(PreparedUtterance {
                id,
                speaker: index,
                source,
            });
        }
    }
    let mut data = PreparedData {
        speakers,
        utterances,
        exclusions,
        trials: Vec::new(),
        features,
    };
    data.trials = build_trials(&data.trial_speakers(Split::Test), &cfg.trials, cfg.seed)?;
    Ok(data)
}

impl PreparedData {
    pub fn assignment(&self) -> SplitAssignment {
        SplitAssignment {
            assignment: self
                .speakers
                .iter()
                .map(|s| (s.speaker_id.clone(), s.split))
                .collect(),
        }
    }

    /// Utterance indices of one split, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.speakers[self.utterances[i].speaker].split == split)
            .collect()
    }

    pub fn labels(&self, index: usize) -> [usize; 3] {
        self.speakers[self.utterances[index].speaker]
            .demographics
            .class_ids()
    }

    pub fn trial_speakers(&self, split: Split) -> Vec<TrialSpeaker> {
        let mut utts: Vec<Vec<String>> = vec![Vec::new(); self.speakers.len()];
        for u in &self.utterances {
            utts[u.speaker].push(u.id.clone());
        }
        self.speakers
            .iter()
            .zip(utts)
            .filter(|(s, _)| s.split == split)
            .map(|(s, utterances)| TrialSpeaker {
                speaker_id: s.speaker_id.clone(),
                utterances,
                demographics: Some(s.demographics),
            })
            .collect()
    }

    /// Model inputs for one split. Audio is read (or synthesized) here.
    pub fn training_set(&self, cfg: &ExperimentConfig, split: Split) -> Result<TrainingSet> {
        let synth = match &cfg.dataset {
            DatasetSource::Synthetic {
                config,
                waveform_seconds: Some(_),
            } => Some(synth_generate(config)?),
            _ => None,
        };
        let items = self
            .split_indices(split)
            .into_iter()
            .map(|i| {
                let u = &self.utterances[i];
                Ok(TrainItem {
                    id: u.id.clone(),
                    speaker_id: self.speakers[u.speaker].speaker_id.clone(),
                    input: self.input(cfg, i, synth.as_ref())?,
                    labels: Some(self.labels(i)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet { items })
    }

    fn input(
        &self,
        cfg: &ExperimentConfig,
        index: usize,
        synth: Option<&SynthDataset>,
    ) -> Result<ModelInput> {
        if let Some(features) = &self.features {
            return Ok(ModelInput::Features(features[index].clone()));
        }
        let source = &self.utterances[index].source;
        match &cfg.dataset {
            DatasetSource::Synthetic {
                waveform_seconds: Some(seconds),
                ..
            } => {
                let synth = synth.expect("synthetic dataset generated");
                let k = source
                    .strip_prefix("synth:")
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|&k| k < synth.utterances.len())
                    .ok_or_else(|| Error::Config(format!("bad synthetic source `{source}`")))?;
                Ok(ModelInput::Audio(synth.waveform(
                    k,
                    cfg.frontend.target_rate,
                    *seconds,
                )))
            }
            DatasetSource::Manifest { audio_root, .. } => {
                Ok(ModelInput::Audio(read_wav(&audio_root.join(source))?))
            }
            DatasetSource::Synthetic { .. } => Err(Error::Config("feature cache missing".into())),
        }
    }

    /// Writes every artifact under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut speakers = String::from("speaker_id\tgender\tage_group\taccent_group\tsplit\n");
        for s in &self.speakers {
            let d = &s.demographics;
            let _ = writeln!(
                speakers,
                "{}\t{}\t{}\t{}\t{}",
                s.speaker_id,
                d.class_name(Attribute::Gender),
                d.class_name(Attribute::Age),
                d.class_name(Attribute::Accent),
                s.split.name()
            );
        }
        write_text(&dir.join(SPEAKERS_FILE), &speakers)?;

        let mut exclusions = String::from("speaker_id\treason\n");
        for e in &self.exclusions {
            let _ = writeln!(exclusions, "{}\t{}", e.speaker_id, e.reason);
        }
        write_text(&dir.join(EXCLUSIONS_FILE), &exclusions)?;

        let mut splits = String::from("speaker_id\tsplit\n");
        for (id, split) in &self.assignment().assignment {
            let _ = writeln!(splits, "{id}\t{}", split.name());
        }
        write_text(&dir.join(SPLITS_FILE), &splits)?;

        let mut utterances = String::from("utterance_id\tspeaker_id\tsource\n");
        for u in &self.utterances {
            let _ = writeln!(
                utterances,
                "{}\t{}\t{}",
                u.id, self.speakers[u.speaker].speaker_id, u.source
            );
        }
        write_text(&dir.join(UTTERANCES_FILE), &utterances)?;
        write_text(&dir.join(TRIALS_FILE), &trials_to_csv(&self.trials))?;
        write_text(&dir.join(SUMMARY_FILE), &self.summary())?;

        let features_path = dir.join(FEATURES_FILE);
        if let Some(features) = &self.features {
            let file = File::create(&features_path).map_err(|e| Error::io(&features_path, e))?;
            let mut out = BufWriter::new(file);
            write_checkpoint(
                &mut out,
                self.utterances.iter().map(|u| u.id.as_str()).zip(features),
            )
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&features_path, e))?;
        } else if features_path.exists() {
            fs::remove_file(&features_path).map_err(|e| Error::io(&features_path, e))?;
        }
        Ok(())
    }

    /// Demographics table over kept speakers plus split and exclusion counts.
    pub fn summary(&self) -> String {
        let demographics: Vec<Demographics> =
            self.speakers.iter().map(|s| s.demographics).collect();
        let mut out = format_summary(&demographic_summary(&demographics));
        let assignment = self.assignment();
        let _ = writeln!(
            out,
            "\nSpeakers: {} kept, {} excluded; utterances: {}",
            self.speakers.len(),
            self.exclusions.len(),
            self.utterances.len()
        );
        for split in Split::ALL {
            let _ = writeln!(
                out,
                "  {:<6} {:>6} speakers {:>7} utterances",
                split.name(),
                assignment.count(split),
                self.split_indices(split).len()
            );
        }
        let genuine = self.trials.iter().filter(|t| t.is_genuine).count();
        let _ = writeln!(
            out,
            "Test trials: {} genuine, {} impostor",
            genuine,
            self.trials.len() - genuine
        );
        out
    }

    /// Reads what [`PreparedData::write`] wrote.
    pub fn read(dir: &Path) -> Result<Self> {
        let speakers_path = dir.join(SPEAKERS_FILE);
        let mut speakers = Vec::new();
        let mut index = BTreeMap::new();
        for (line, cells) in read_tsv(&speakers_path, 5)? {
            let bad = |what: &str| Error::data(&speakers_path, format!("line {line}: bad {what}"));
            let class = |attr: Attribute, text: &str| {
                attr.parse_class(text).ok_or_else(|| bad(attr.name()))
            };
            let ids = [
                class(Attribute::Gender, &cells[1])?,
                class(Attribute::Age, &cells[2])?,
                class(Attribute::Accent, &cells[3])?,
            ];
            index.insert(cells[0].clone(), speakers.len());
            speakers.push(PreparedSpeaker {
                speaker_id: cells[0].clone(),
                demographics: Demographics::from_class_ids(ids)
                    .expect("parsed class ids are in range"),
                split: Split::parse(&cells[4]).ok_or_else(|| bad("split"))?,
            });
        }

        let utterances_path = dir.join(UTTERANCES_FILE);
        let mut utterances = Vec::new();
        for (line, cells) in read_tsv(&utterances_path, 3)? {
            let speaker = *index.get(&cells[1]).ok_or_else(|| {
                Error::data(
                    &utterances_path,
                    format!("line {line}: unknown speaker `{}`", cells[1]),
                )
            })?;
            utterances.push(PreparedUtterance {
                id: cells[0].clone(),
                speaker,
                source: cells[2].clone(),
            });
        }

        let exclusions_path = dir.join(EXCLUSIONS_FILE);
        let mut exclusions = Vec::new();
        for (line, cells) in read_tsv(&exclusions_path, 2)? {
            let reason = crate::data::ExclusionReason::parse(&cells[1]).ok_or_else(|| {
                Error::data(
                    &exclusions_path,
                    format!("line {line}: unknown reason `{}`", cells[1]),
                )
            })?;
            exclusions.push(Exclusion {
                speaker_id: cells[0].clone(),
                reason,
            });
        }

        let trials_path = dir.join(TRIALS_FILE);
        let text = fs::read_to_string(&trials_path).map_err(|e| Error::io(&trials_path, e))?;
        let trials =
            trials_from_csv(&text).map_err(|e| Error::data(&trials_path, e.to_string()))?;

        let features_path = dir.join(FEATURES_FILE);
        let features = if features_path.exists() {
            let file = File::open(&features_path).map_err(|e| Error::io(&features_path, e))?;
            let entries = read_checkpoint(&mut BufReader::new(file))
                .map_err(|e| Error::data(&features_path, e.to_string()))?;
            if entries.len() != utterances.len()
                || entries
                    .iter()
                    .zip(&utterances)
                    .any(|((name, _), u)| *name != u.id)
            {
                return Err(Error::data(
                    &features_path,
                    "feature cache does not match the utterance list",
                ));
            }
            Some(entries.into_iter().map(|(_, t)| t).collect())
        } else {
            None
        };

        Ok(PreparedData {
            speakers,
            utterances,
            exclusions,
            trials,
            features,
        })
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Data rows of a headed TSV file with their 1-based line numbers.
fn read_tsv(path: &Path, columns: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cells.len() != columns {
            return Err(Error::data(
                path,
                format!(
                    "line {}: expected {columns} columns, found {}",
                    i + 1,
                    cells.len()
                ),
            ));
        }
        rows.push((i + 1, cells));
    }
    Ok(rows)
}
