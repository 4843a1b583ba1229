//! Grid points: naming, training into run directories, and per-run
//! evaluation (embeddings, probes, verification).

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, RawConfig};
use super::dataset::{write_text, PreparedData};
use super::embeddings::{Branch, Embeddings};
use crate::autodiff::Tensor;
use crate::data::{Attribute, Split};
use crate::error::{Error, Result};
use crate::models::{embed_set, train, EncoderParams, TrainMode, TrainedModel, TrainingSet};
use crate::probes::{probe_attribute, probe_reports_csv, ProbeReport};
use crate::verification::{score_trials, subgroup_report, verification_report, VerificationReport};

pub const RUN_FILE: &str = "run.txt";
pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.dseb";
pub const CURVES_FILE: &str = "curves.csv";
pub const VERIFY_CSV_HEADER: &str = "attribute,group,roc_auc,eer,n_genuine,n_impostor";

/// One grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub mode: TrainMode,
}

impl RunSpec {
    pub fn new(mode: TrainMode) -> Self {
        RunSpec {
            name: run_name(&mode),
            mode,
        }
    }

    pub fn branches(&self) -> &'static [Branch] {
        match self.mode {
            TrainMode::Bottleneck(_) => &[Branch::Demo, Branch::Residual],
            _ => &[Branch::Full],
        }
    }

    /// The branch used for verification: only `z_res` for bottleneck runs.
    pub fn verification_branch(&self) -> Branch {
        match self.mode {
            TrainMode::Bottleneck(_) => Branch::Residual,
            _ => Branch::Full,
        }
    }
}

pub fn run_name(mode: &TrainMode) -> String {
    match mode {
        TrainMode::Baseline => "baseline".into(),
        TrainMode::Adversarial { lambda_adv } => format!("adversarial_l{lambda_adv:?}"),
        TrainMode::Bottleneck(b) => {
            let [g, a, c] = b.lambdas;
            format!("bottleneck_k{}_l{g:?}_{a:?}_{c:?}", b.k)
        }
    }
}

/// Baseline, then one adversarial run per lambda, then the k × triple
/// bottleneck grid.
pub fn sweep_grid(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut grid = vec![RunSpec::new(TrainMode::Baseline)];
    for &lambda_adv in &cfg.sweep.lambdas {
        grid.push(RunSpec::new(TrainMode::Adversarial { lambda_adv }));
    }
    for &k in &cfg.sweep.ks {
        for &triple in &cfg.sweep.triples {
            grid.push(RunSpec::new(cfg.bottleneck_mode(k, triple)));
        }
    }
    grid
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

pub fn run_dir(out: &Path, name: &str) -> PathBuf {
    runs_dir(out).join(name)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Diverged {
        epoch: usize,
    },
    /// Never trained because the run it builds on failed.
    Skipped,
}

impl RunStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged { .. } => "diverged",
            RunStatus::Skipped => "skipped",
        }
    }
}

/// Contents of a run directory's `run.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub status: RunStatus,
}

impl RunRecord {
    fn render(&self) -> String {
        let mut raw = RawConfig::default();
        raw.set("name", self.spec.name.clone());
        raw.set("mode", self.spec.mode.name());
        match self.spec.mode {
            TrainMode::Baseline => {}
            TrainMode::Adversarial { lambda_adv } => {
                raw.set("lambda_adv", format!("{lambda_adv:?}"))
            }
            TrainMode::Bottleneck(b) => {
                raw.set("k", b.k.to_string());
                raw.set(
                    "lambdas",
                    format!("{:?}:{:?}:{:?}", b.lambdas[0], b.lambdas[1], b.lambdas[2]),
                );
                raw.set("gamma", format!("{:?}", b.gamma));
                raw.set("freeze_encoder", b.freeze_encoder.to_string());
            }
        }
        raw.set("status", self.status.name());
        if let RunStatus::Diverged { epoch } = self.status {
            raw.set("diverged_epoch", epoch.to_string());
        }
        raw.render()
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw = RawConfig::parse(&text).map_err(|e| Error::data(&path, e.to_string()))?;
        let get = |k: &str| {
            raw.entries
                .get(k)
                .cloned()
                .ok_or_else(|| Error::data(&path, format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::data(&path, format!("bad `{k}`")))
        };
        let mode = match get("mode")?.as_str() {
            "baseline" => TrainMode::Baseline,
            "adversarial" => TrainMode::Adversarial {
                lambda_adv: num("lambda_adv")?,
            },
            "bottleneck" => {
                let triple: Vec<f64> = get("lambdas")?
                    .split(':')
                    .map(|s| s.parse().map_err(|_| Error::data(&path, "bad `lambdas`")))
                    .collect::<Result<_>>()?;
                let lambdas: [f64; 3] = triple
                    .try_into()
                    .map_err(|_| Error::data(&path, "bad `lambdas`"))?;
                TrainMode::Bottleneck(crate::models::BottleneckConfig {
                    k: num("k")? as usize,
                    lambdas,
                    gamma: num("gamma")?,
                    freeze_encoder: get("freeze_encoder")? == "true",
                })
            }
            other => return Err(Error::data(&path, format!("unknown mode `{other}`"))),
        };
        let status = match get("status")?.as_str() {
            "ok" => RunStatus::Ok,
            "diverged" => RunStatus::Diverged {
                epoch: num("diverged_epoch")? as usize,
            },
            "skipped" => RunStatus::Skipped,
            other => return Err(Error::data(&path, format!("unknown status `{other}`"))),
        };
        Ok(RunRecord {
            spec: RunSpec {
                name: get("name")?,
                mode,
            },
            status,
        })
    }
}

/// Config snapshot for one grid point: the experiment's raw config with the
/// run's mode fields substituted.
fn snapshot(raw: &RawConfig, spec: &RunSpec) -> String {
    let mut raw = raw.clone();
    for key in ["train.mode", "train.lambda_adv", "train.k", "train.lambdas"] {
        raw.entries.remove(key);
    }
    raw.set("train.mode", spec.mode.name());
    match spec.mode {
        TrainMode::Baseline => {}
        TrainMode::Adversarial { lambda_adv } => {
            raw.set("train.lambda_adv", format!("{lambda_adv:?}"))
        }
        TrainMode::Bottleneck(b) => {
            raw.set("train.k", b.k.to_string());
            raw.set(
                "train.lambdas",
                format!("{:?}:{:?}:{:?}", b.lambdas[0], b.lambdas[1], b.lambdas[2]),
            );
        }
    }
    raw.render()
}

/// Trains one grid point into its run directory. Divergence is recorded
/// in `run.txt` rather than returned as an error.
pub fn train_run(
    out: &Path,
    cfg: &ExperimentConfig,
    raw: &RawConfig,
    train_set: &TrainingSet,
    spec: &RunSpec,
    pretrained: Option<&EncoderParams>,
) -> Result<RunRecord> {
    let dir = run_dir(out, &spec.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join(CONFIG_SNAPSHOT), &snapshot(raw, spec))?;
    let stale = [CHECKPOINT_FILE, CURVES_FILE];
    for name in stale {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    log::info!("training {}", spec.name);
    let status = match train(train_set, &cfg.train_config(spec.mode), pretrained) {
        Ok(model) => {
            write_model(&dir, &model)?;
            write_text(&dir.join(CURVES_FILE), &model.trace.to_csv())?;
            RunStatus::Ok
        }
        Err(Error::Diverged { epoch }) => {
            log::warn!("{} diverged at epoch {epoch}", spec.name);
            RunStatus::Diverged { epoch }
        }
        Err(e) => return Err(e),
    };
    let record = RunRecord {
        spec: spec.clone(),
        status,
    };
    write_text(&dir.join(RUN_FILE), &record.render())?;
    Ok(record)
}

pub(crate) fn write_skipped(out: &Path, raw: &RawConfig, spec: &RunSpec) -> Result<RunRecord> {
    let dir = run_dir(out, &spec.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join(CONFIG_SNAPSHOT), &snapshot(raw, spec))?;
    let record = RunRecord {
        spec: spec.clone(),
        status: RunStatus::Skipped,
    };
    write_text(&dir.join(RUN_FILE), &record.render())?;
    Ok(record)
}

fn write_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    let path = dir.join(CHECKPOINT_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    model
        .write_checkpoint(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))
}

pub fn load_model(out: &Path, name: &str) -> Result<(RunRecord, TrainedModel)> {
    let dir = run_dir(out, name);
    let record = RunRecord::read(&dir)?;
    if record.status != RunStatus::Ok {
        return Err(Error::data(
            &dir,
            format!("run `{name}` has no model ({})", record.status.name()),
        ));
    }
    let path = dir.join(CHECKPOINT_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let bottleneck = match record.spec.mode {
        TrainMode::Bottleneck(b) => Some((b.lambdas, b.gamma)),
        _ => None,
    };
    let model = TrainedModel::read_checkpoint(&mut BufReader::new(file), bottleneck)
        .map_err(|e| Error::data(&path, e.to_string()))?;
    Ok((record, model))
}

pub fn embeddings_path(out: &Path, run: &str, split: Split, branch: Branch) -> PathBuf {
    run_dir(out, run)
        .join("embeddings")
        .join(format!("{}_{}.demb", split.name(), branch.name()))
}

/// Embeddings of one split through one branch.
pub fn embed(
    model: &TrainedModel,
    set: &TrainingSet,
    cfg: &ExperimentConfig,
    branch: Branch,
) -> Result<Embeddings> {
    let z = embed_set(&model.encoder, set, &cfg.frontend, cfg.seed)?;
    let matrix = match (branch, &model.bottleneck) {
        (Branch::Full, _) => z,
        (_, None) => {
            return Err(Error::Config(format!(
                "branch `{}` needs a bottleneck run",
                branch.name()
            )))
        }
        (Branch::Demo, Some(bn)) => bn.branches(&z)?.0,
        (Branch::Residual, Some(bn)) => bn.branches(&z)?.1,
    };
    let ids = set.items.iter().map(|i| i.id.clone()).collect();
    Embeddings::new(branch, ids, &matrix)
}

pub fn write_embeddings(path: &Path, e: &Embeddings) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
    }
    let file = File::create(path).map_err(|err| Error::io(path, err))?;
    let mut w = BufWriter::new(file);
    e.write(&mut w)
        .and_then(|_| w.flush())
        .map_err(|err| Error::io(path, err))
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Embeddings::read(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Data { message, .. } => Error::data(path, message),
        other => other,
    })
}

fn labels_for(data: &PreparedData, e: &Embeddings, attribute: Attribute) -> Result<Vec<usize>> {
    let index: std::collections::HashMap<&str, usize> = data
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id.as_str(), i))
        .collect();
    e.ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| data.labels(i)[attribute.index()])
                .ok_or_else(|| {
                    Error::Config(format!("utterance `{id}` is not in the prepared dataset"))
                })
        })
        .collect()
}

/// Probes trained on `train` and reported on each evaluation split.
/// Attributes with a class absent from the training split are skipped.
pub fn probe_embeddings(
    data: &PreparedData,
    cfg: &ExperimentConfig,
    train: (&str, &Embeddings),
    evals: &[(&str, &Embeddings)],
) -> Result<Vec<ProbeReport>> {
    for (name, e) in evals {
        if e.dim() != train.1.dim() {
            return Err(Error::Config(format!(
                "embedding dims disagree: {} has {}, {} has {}",
                train.0,
                train.1.dim(),
                name,
                e.dim()
            )));
        }
    }
    let mut reports = Vec::new();
    for attribute in Attribute::ALL {
        let train_y = labels_for(data, train.1, attribute)?;
        let eval_y = evals
            .iter()
            .map(|(_, e)| labels_for(data, e, attribute))
            .collect::<Result<Vec<_>>>()?;
        let eval_sets: Vec<(&str, &Tensor, &[usize])> = evals
            .iter()
            .zip(&eval_y)
            .map(|((name, e), y)| (*name, &e.matrix, y.as_slice()))
            .collect();
        match probe_attribute(
            attribute.name(),
            attribute.num_classes(),
            (&train.1.matrix, &train_y),
            &eval_sets,
            &cfg.probe,
            cfg.seed,
            cfg.probe_mlp,
        ) {
            Ok(rows) => reports.extend(rows),
            Err(Error::MissingClass(c)) => log::warn!(
                "skipping {attribute} probe: class {} absent from {}",
                attribute.class_name(c),
                train.0
            ),
            Err(e) => return Err(e),
        }
    }
    Ok(reports)
}

/// Overall verification plus one row per demographic subgroup.
pub fn verify_embeddings(
    data: &PreparedData,
    e: &Embeddings,
) -> Result<(VerificationReport, String)> {
    let index: std::collections::HashMap<&str, usize> = e
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let scores = score_trials(&data.trials, |id| index.get(id).map(|&i| e.row(i).to_vec()))?;
    let labels: Vec<bool> = data.trials.iter().map(|t| t.is_genuine).collect();
    let overall = verification_report(&scores, &labels)?;
    let mut csv = format!("{VERIFY_CSV_HEADER}\n");
    let row = |csv: &mut String, attr: &str, group: &str, r: Option<&VerificationReport>| {
        let _ = match r {
            Some(r) => writeln!(
                csv,
                "{attr},{group},{:.6},{:.6},{},{}",
                r.roc_auc, r.eer, r.n_genuine, r.n_impostor
            ),
            None => writeln!(csv, "{attr},{group},,,,"),
        };
    };
    row(&mut csv, "all", "all", Some(&overall));
    for attribute in Attribute::ALL {
        for g in subgroup_report(&data.trials, &scores, attribute)? {
            row(&mut csv, attribute.name(), g.group, g.report.as_ref());
        }
    }
    Ok((overall, csv))
}

pub fn probes_path(out: &Path, run: &str, branch: Branch) -> PathBuf {
    run_dir(out, run).join(format!("probes_{}.csv", branch.name()))
}

pub fn verify_path(out: &Path, run: &str, branch: Branch) -> PathBuf {
    run_dir(out, run).join(format!("verify_{}.csv", branch.name()))
}

/// Embeds val and test through every branch of the run, probes
/// (trained on val) and scores the test trials.
pub fn evaluate_run(
    out: &Path,
    cfg: &ExperimentConfig,
    data: &PreparedData,
    sets: &[(Split, &TrainingSet)],
    name: &str,
) -> Result<()> {
    let (record, model) = load_model(out, name)?;
    log::info!("evaluating {name}");
    for &branch in record.spec.branches() {
        let mut by_split = Vec::new();
        for &(split, set) in sets {
            let e = embed(&model, set, cfg, branch)?;
            write_embeddings(&embeddings_path(out, name, split, branch), &e)?;
            by_split.push((split, e));
        }
        let get = |s: Split| by_split.iter().find(|(x, _)| *x == s).map(|(_, e)| e);
        if let (Some(val), Some(test)) = (get(Split::Val), get(Split::Test)) {
            let reports =
                probe_embeddings(data, cfg, ("val", val), &[("val", val), ("test", test)])?;
            write_text(
                &probes_path(out, name, branch),
                &probe_reports_csv(&reports),
            )?;
        }
        if branch == record.spec.verification_branch() {
            if let Some(test) = get(Split::Test) {
                let (_, csv) = verify_embeddings(data, test)?;
                write_text(&verify_path(out, name, branch), &csv)?;
            }
        }
    }
    Ok(())
}
