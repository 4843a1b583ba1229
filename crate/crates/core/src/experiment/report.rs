//! Consolidated tables over completed run directories. One row per run
//! (and per attribute for probe tables); nothing is averaged across runs.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::dataset::write_text;
use super::embeddings::Branch;
use super::run::{probes_path, runs_dir, verify_path, RunRecord, RunStatus, RUN_FILE};
use crate::error::{Error, Result};
use crate::models::TrainMode;
use crate::probes::ProbeReport;

/// A header plus string cells, rendered as CSV or aligned text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, headers: &[&str]) -> Self {
        Table {
            name: name.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Cells containing commas or quotes are quoted.
    pub fn to_csv(&self) -> String {
        let q = |c: &String| {
            if c.contains(',') || c.contains('"') {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut out = self.headers.iter().map(q).collect::<Vec<_>>().join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.iter().map(q).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut out = format!("{}\n{}\n", self.name, line(&self.headers));
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "{}", rule.join("  "));
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationRow {
    pub roc_auc: f64,
    pub eer: f64,
}

/// Everything the report needs from one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResults {
    pub record: RunRecord,
    pub verification: Option<VerificationRow>,
    /// Test-split probe rows per branch.
    pub probes: Vec<(Branch, Vec<ProbeReport>)>,
}

fn mode_rank(mode: &TrainMode) -> u8 {
    match mode {
        TrainMode::Baseline => 0,
        TrainMode::Adversarial { .. } => 1,
        TrainMode::Bottleneck(_) => 2,
    }
}

fn grid_order(a: &RunRecord, b: &RunRecord) -> Ordering {
    let key = |r: &RunRecord| -> (u8, f64, usize, [f64; 3]) {
        match r.spec.mode {
            TrainMode::Baseline => (0, 0.0, 0, [0.0; 3]),
            TrainMode::Adversarial { lambda_adv } => (1, lambda_adv, 0, [0.0; 3]),
            TrainMode::Bottleneck(bc) => (2, 0.0, bc.k, bc.lambdas),
        }
    };
    let (ka, kb) = (key(a), key(b));
    ka.0.cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then(ka.2.cmp(&kb.2))
        .then_with(|| {
            ka.3.iter()
                .zip(&kb.3)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.spec.name.cmp(&b.spec.name))
}

fn read_probe_rows(path: &Path) -> Result<Vec<ProbeReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| ProbeReport::parse_csv_row(l).map_err(|e| Error::data(path, e.to_string())))
        .filter(|r| r.as_ref().map_or(true, |r| r.split == "test"))
        .collect()
}

fn read_verification(path: &Path) -> Result<VerificationRow> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line = text
        .lines()
        .find(|l| l.starts_with("all,all,"))
        .ok_or_else(|| Error::data(path, "no overall row"))?;
    let cells: Vec<&str> = line.split(',').collect();
    let num = |i: usize| -> Result<f64> {
        cells
            .get(i)
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::data(path, "malformed overall row"))
    };
    Ok(VerificationRow {
        roc_auc: num(2)?,
        eer: num(3)?,
    })
}

/// Collects every run directory that has a `run.txt`, in grid order.
pub fn collect_runs(out: &Path) -> Result<Vec<RunResults>> {
    let dir = runs_dir(out);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().join(RUN_FILE).exists() {
            records.push(RunRecord::read(&entry.path())?);
        }
    }
    records.sort_by(grid_order);
    records
        .into_iter()
        .map(|record| {
            let name = &record.spec.name;
            let vpath = verify_path(out, name, record.spec.verification_branch());
            let verification = if vpath.exists() {
                Some(read_verification(&vpath)?)
            } else {
                None
            };
            let mut probes = Vec::new();
            for &branch in record.spec.branches() {
                let p = probes_path(out, name, branch);
                if p.exists() {
                    probes.push((branch, read_probe_rows(&p)?));
                }
            }
            Ok(RunResults {
                record,
                verification,
                probes,
            })
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn lambda_cell(mode: &TrainMode) -> String {
    match mode {
        TrainMode::Adversarial { lambda_adv } => format!("{lambda_adv:?}"),
        _ => String::new(),
    }
}

fn k_cell(mode: &TrainMode) -> (String, String) {
    match mode {
        TrainMode::Bottleneck(b) => (
            b.k.to_string(),
            format!(
                "({:?}, {:?}, {:?})",
                b.lambdas[0], b.lambdas[1], b.lambdas[2]
            ),
        ),
        _ => (String::new(), String::new()),
    }
}

fn status_cell(r: &RunResults) -> String {
    match r.record.status {
        RunStatus::Ok if r.verification.is_none() && r.probes.is_empty() => "not_evaluated".into(),
        RunStatus::Ok => "ok".into(),
        RunStatus::Diverged { epoch } => format!("diverged@{epoch}"),
        RunStatus::Skipped => "skipped".into(),
    }
}

fn verification_cells(r: &RunResults) -> [String; 2] {
    match &r.verification {
        Some(v) => [fmt(v.roc_auc), fmt(v.eer)],
        None => [String::new(), String::new()],
    }
}

fn probe_cells(p: &ProbeReport) -> Vec<String> {
    vec![
        p.attribute.clone(),
        fmt(p.point_accuracy),
        format!("[{}; {}]", fmt(p.ci_low), fmt(p.ci_high)),
        fmt(p.mlp_mean),
        fmt(p.mlp_std),
    ]
}

/// Probe rows for a run and branch, or one placeholder row per attribute
/// when the run has none.
fn probe_rows(r: &RunResults, branch: Branch) -> Vec<Vec<String>> {
    match r.probes.iter().find(|(b, _)| *b == branch) {
        Some((_, rows)) => rows.iter().map(probe_cells).collect(),
        None if r.record.status != RunStatus::Ok => crate::data::Attribute::ALL
            .iter()
            .map(|a| {
                let mut cells = vec![String::new(); 5];
                cells[0] = a.name().to_string();
                cells
            })
            .collect(),
        None => Vec::new(),
    }
}

/// Builds every report table from collected runs.
pub fn build_tables(runs: &[RunResults]) -> Vec<Table> {
    const PROBE_COLS: [&str; 5] = ["attribute", "linear_acc", "ci_95", "mlp_mean", "mlp_std"];
    let with_probe = |lead: &[&str]| -> Vec<String> {
        lead.iter()
            .chain(PROBE_COLS.iter())
            .map(|s| s.to_string())
            .collect()
    };

    let mut all_verif = Table::new(
        "verification",
        &[
            "run",
            "mode",
            "lambda_adv",
            "k",
            "lambdas",
            "branch",
            "status",
            "roc_auc",
            "eer",
        ],
    );
    let mut all_probes = Table::new("probes", &[]);
    all_probes.headers = with_probe(&[
        "run",
        "mode",
        "lambda_adv",
        "k",
        "lambdas",
        "branch",
        "status",
    ]);
    let mut adv_verif = Table::new(
        "adversarial_verification",
        &["lambda_adv", "status", "roc_auc", "eer"],
    );
    let mut adv_probes = Table::new("adversarial_probes", &[]);
    adv_probes.headers = with_probe(&["lambda_adv", "status"]);
    let mut bn_verif = Table::new(
        "bottleneck_verification",
        &["k", "lambdas", "status", "roc_auc", "eer"],
    );
    let mut demo_probes = Table::new("demo_branch_probes", &[]);
    demo_probes.headers = with_probe(&["k", "lambdas", "status"]);
    let mut res_probes = Table::new("residual_branch_probes", &[]);
    res_probes.headers = with_probe(&["k", "lambdas", "status"]);

    for r in runs {
        let mode = &r.record.spec.mode;
        let status = status_cell(r);
        let (k, lambdas) = k_cell(mode);
        let lambda = lambda_cell(mode);
        let [auc, eer] = verification_cells(r);
        let lead = vec![
            r.record.spec.name.clone(),
            mode.name().to_string(),
            lambda.clone(),
            k.clone(),
            lambdas.clone(),
        ];
        let vbranch = r.record.spec.verification_branch();
        let mut row = lead.clone();
        row.extend([
            vbranch.name().to_string(),
            status.clone(),
            auc.clone(),
            eer.clone(),
        ]);
        all_verif.rows.push(row);
        for &branch in r.record.spec.branches() {
            for cells in probe_rows(r, branch) {
                let mut row = lead.clone();
                row.extend([branch.name().to_string(), status.clone()]);
                row.extend(cells);
                all_probes.rows.push(row);
            }
        }
        match mode_rank(mode) {
            1 => {
                adv_verif
                    .rows
                    .push(vec![lambda.clone(), status.clone(), auc, eer]);
                for cells in probe_rows(r, Branch::Full) {
                    let mut row = vec![lambda.clone(), status.clone()];
                    row.extend(cells);
                    adv_probes.rows.push(row);
                }
            }
            2 => {
                bn_verif
                    .rows
                    .push(vec![k.clone(), lambdas.clone(), status.clone(), auc, eer]);
                for (branch, table) in [
                    (Branch::Demo, &mut demo_probes),
                    (Branch::Residual, &mut res_probes),
                ] {
                    for cells in probe_rows(r, branch) {
                        let mut row = vec![k.clone(), lambdas.clone(), status.clone()];
                        row.extend(cells);
                        table.rows.push(row);
                    }
                }
            }
            _ => {}
        }
    }
    vec![
        all_verif,
        all_probes,
        adv_verif,
        adv_probes,
        bn_verif,
        demo_probes,
        res_probes,
    ]
}

/// Writes `<out>/report/<table>.csv` and `report.txt`; returns the text.
pub fn write_report(out: &Path) -> Result<String> {
    let runs = collect_runs(out)?;
    let tables = build_tables(&runs);
    let dir = out.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut text = String::new();
    for t in &tables {
        write_text(&dir.join(format!("{}.csv", t.name)), &t.to_csv())?;
        if !t.rows.is_empty() {
            text.push_str(&t.to_text());
            text.push('\n');
        }
    }
    write_text(&dir.join("report.txt"), &text)?;
    Ok(text)
}
