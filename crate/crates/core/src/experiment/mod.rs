//! Experiment driver behind the CLI: prepare data, train single runs or the
//! full grid, embed, probe, verify and report.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! <out>/config.txt             resolved config snapshot
//! <out>/data/                  speakers, exclusions, splits, trials, features
//! <out>/runs/<name>/           run.txt, config.txt, checkpoint, curves,
//!                              embeddings/, probes_<branch>.csv, verify_<branch>.csv
//! <out>/report/                consolidated CSV tables and report.txt
//! ```

mod config;
mod dataset;
mod embeddings;
mod report;
mod run;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{DatasetSource, ExperimentConfig, RawConfig, SweepConfig};
pub use dataset::{data_dir, prepare_data, PreparedData, PreparedSpeaker, PreparedUtterance};
pub use embeddings::{Branch, Embeddings, EMBEDDINGS_MAGIC};
pub use report::{build_tables, collect_runs, write_report, RunResults, Table};
pub use run::{
    embed, embeddings_path, evaluate_run, load_model, probe_embeddings, probes_path,
    read_embeddings, run_dir, run_name, runs_dir, sweep_grid, train_run, verify_embeddings,
    verify_path, write_embeddings, RunRecord, RunSpec, RunStatus, CHECKPOINT_FILE, CONFIG_SNAPSHOT,
    CURVES_FILE, RUN_FILE,
};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::models::{TrainMode, TrainingSet};
use crate::probes::probe_reports_csv;
use crate::verification::VerificationReport;

/// A resolved config together with the raw entries it came from.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub raw: RawConfig,
}

impl Experiment {
    /// Loads a config file and applies `overrides` (later entries win).
    pub fn load(path: &Path, overrides: &[(&str, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw = RawConfig::parse(&text).map_err(|e| match e {
            Error::MalformedRow { line, reason } => {
                Error::Config(format!("{}: line {line}: {reason}", path.display()))
            }
            other => other,
        })?;
        for (k, v) in overrides {
            raw.set(k, v.clone());
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = ExperimentConfig::from_raw(&raw, base)?;
        Ok(Experiment { cfg, raw })
    }

    pub fn from_raw(raw: RawConfig, base: &Path) -> Result<Self> {
        let cfg = ExperimentConfig::from_raw(&raw, base)?;
        Ok(Experiment { cfg, raw })
    }

    /// Redirects output, as `--out` does.
    pub fn with_output(mut self, out: PathBuf) -> Self {
        self.cfg.output = out;
        self
    }

    pub fn out(&self) -> &Path {
        &self.cfg.output
    }

    fn prepared(&self) -> Result<PreparedData> {
        let dir = data_dir(self.out());
        if !dir.exists() {
            return Err(Error::data(&dir, "no prepared data; run `prepare` first"));
        }
        PreparedData::read(&dir)
    }
}

/// Builds and writes the dataset; returns the summary table.
pub fn cmd_prepare(exp: &Experiment) -> Result<String> {
    let data = prepare_data(&exp.cfg)?;
    let out = exp.out();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    dataset::write_text(&out.join(CONFIG_SNAPSHOT), &exp.raw.render())?;
    data.write(&data_dir(out))?;
    Ok(data.summary())
}

fn pretrained_baseline(out: &Path) -> Result<crate::models::EncoderParams> {
    let (_, model) = load_model(out, "baseline").map_err(|e| {
        Error::data(
            run_dir(out, "baseline"),
            format!("bottleneck needs a trained baseline: {e}"),
        )
    })?;
    Ok(model.encoder)
}

/// Trains the single run described by `train.mode`.
pub fn cmd_train(exp: &Experiment) -> Result<RunRecord> {
    let data = exp.prepared()?;
    let set = data.training_set(&exp.cfg, Split::Train)?;
    let spec = RunSpec::new(exp.cfg.mode);
    let pretrained = match spec.mode {
        TrainMode::Bottleneck(_) => Some(pretrained_baseline(exp.out())?),
        _ => None,
    };
    train_run(
        exp.out(),
        &exp.cfg,
        &exp.raw,
        &set,
        &spec,
        pretrained.as_ref(),
    )
}

/// Trains and evaluates every grid point, then writes the report. Grid
/// points after the baseline run on a pool of `jobs` threads. Diverged
/// points are recorded and skipped; any other error aborts.
pub fn cmd_sweep(exp: &Experiment, jobs: usize) -> Result<Vec<RunRecord>> {
    let out = exp.out();
    let data = exp.prepared()?;
    let train_set = data.training_set(&exp.cfg, Split::Train)?;
    let val_set = data.training_set(&exp.cfg, Split::Val)?;
    let test_set = data.training_set(&exp.cfg, Split::Test)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let grid = sweep_grid(&exp.cfg);
    let (baseline, rest) = grid.split_first().expect("grid always holds the baseline");
    let baseline_record = train_run(out, &exp.cfg, &exp.raw, &train_set, baseline, None)?;
    let pretrained = match baseline_record.status {
        RunStatus::Ok => Some(load_model(out, &baseline.name)?.1.encoder),
        _ => None,
    };

    let mut records = vec![baseline_record];
    let trained: Vec<RunRecord> = pool.install(|| {
        rest.par_iter()
            .map(|spec| match (spec.mode, &pretrained) {
                (TrainMode::Bottleneck(_), None) => skip_run(out, &exp.raw, spec),
                (TrainMode::Bottleneck(_), Some(enc)) => {
                    train_run(out, &exp.cfg, &exp.raw, &train_set, spec, Some(enc))
                }
                _ => train_run(out, &exp.cfg, &exp.raw, &train_set, spec, None),
            })
            .collect::<Result<Vec<_>>>()
    })?;
    records.extend(trained);

    let sets: [(Split, &TrainingSet); 2] = [(Split::Val, &val_set), (Split::Test, &test_set)];
    pool.install(|| {
        records
            .par_iter()
            .filter(|r| r.status == RunStatus::Ok)
            .map(|r| evaluate_run(out, &exp.cfg, &data, &sets, &r.spec.name))
            .collect::<Result<Vec<()>>>()
    })?;
    write_report(out)?;
    Ok(records)
}

fn skip_run(out: &Path, raw: &RawConfig, spec: &RunSpec) -> Result<RunRecord> {
    log::warn!("skipping {}: the baseline it builds on diverged", spec.name);
    run::write_skipped(out, raw, spec)
}

fn split_set(exp: &Experiment, data: &PreparedData, split: Split) -> Result<TrainingSet> {
    data.training_set(&exp.cfg, split)
}

/// Writes the embeddings of one split through one branch of a run.
pub fn cmd_embed(exp: &Experiment, run: &str, split: Split, branch: Branch) -> Result<PathBuf> {
    let data = exp.prepared()?;
    let (_, model) = load_model(exp.out(), run)?;
    let set = split_set(exp, &data, split)?;
    let e = embed(&model, &set, &exp.cfg, branch)?;
    let path = embeddings_path(exp.out(), run, split, branch);
    write_embeddings(&path, &e)?;
    Ok(path)
}

fn embeddings_or_embed(
    exp: &Experiment,
    run: &str,
    split: Split,
    branch: Branch,
) -> Result<Embeddings> {
    let path = embeddings_path(exp.out(), run, split, branch);
    if !path.exists() {
        cmd_embed(exp, run, split, branch)?;
    }
    read_embeddings(&path)
}

/// Probes a run's branch: trained on validation embeddings, reported on
/// validation and test.
pub fn cmd_probe(exp: &Experiment, run: &str, branch: Branch) -> Result<PathBuf> {
    let data = exp.prepared()?;
    let val = embeddings_or_embed(exp, run, Split::Val, branch)?;
    let test = embeddings_or_embed(exp, run, Split::Test, branch)?;
    let reports = probe_embeddings(
        &data,
        &exp.cfg,
        ("val", &val),
        &[("val", &val), ("test", &test)],
    )?;
    let path = probes_path(exp.out(), run, branch);
    dataset::write_text(&path, &probe_reports_csv(&reports))?;
    Ok(path)
}

/// Scores the prepared test trials with a run's branch.
pub fn cmd_verify(
    exp: &Experiment,
    run: &str,
    branch: Branch,
) -> Result<(VerificationReport, PathBuf)> {
    let data = exp.prepared()?;
    let test = embeddings_or_embed(exp, run, Split::Test, branch)?;
    let (report, csv) = verify_embeddings(&data, &test)?;
    let path = verify_path(exp.out(), run, branch);
    dataset::write_text(&path, &csv)?;
    Ok((report, path))
}

pub fn cmd_report(out: &Path) -> Result<String> {
    write_report(out)
}
