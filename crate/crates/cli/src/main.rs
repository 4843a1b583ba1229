//! `dseb`: prepare data, train, sweep, embed, probe, verify, report.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or I/O error,
//! 3 when the only failures were diverged runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dseb::data::Split;
use dseb::experiment::{
    cmd_embed, cmd_prepare, cmd_probe, cmd_report, cmd_sweep, cmd_train, cmd_verify, load_model,
    Branch, Experiment, RunStatus,
};
use dseb::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dseb",
    version,
    about = "Demographic leakage in contrastive speaker embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (flat `key = value` file).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct RunSelect {
    /// Run directory name under `<out>/runs`.
    #[arg(long, default_value = "baseline")]
    run: String,
    /// Embedding branch; bottleneck runs default to the residual branch.
    #[arg(long, value_enum)]
    branch: Option<BranchArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize speakers, split them, build trials and cache features.
    Prepare(Common),
    /// Train the single run described by `train.mode`.
    Train(Common),
    /// Train and evaluate the whole grid, then write the report.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parallel grid points.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write an embeddings file for one split and branch of a run.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: RunSelect,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train probes on validation embeddings; report validation and test.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: RunSelect,
    },
    /// Score the test trials.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: RunSelect,
    },
    /// Consolidate every run directory into report tables.
    Report(Common),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BranchArg {
    Full,
    Demo,
    Residual,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Full => Branch::Full,
            BranchArg::Demo => Branch::Demo,
            BranchArg::Residual => Branch::Residual,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load(common: &Common) -> dseb::Result<Experiment> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(("seed", seed.to_string()));
    }
    let exp = Experiment::load(&common.config, &overrides)?;
    Ok(match &common.out {
        Some(out) => exp.with_output(out.clone()),
        None => exp,
    })
}

fn branch_for(exp: &Experiment, select: &RunSelect) -> dseb::Result<Branch> {
    if let Some(b) = select.branch {
        return Ok(b.into());
    }
    let (record, _) = load_model(exp.out(), &select.run)?;
    Ok(record.spec.verification_branch())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> dseb::Result<u8> {
    match cli.command {
        Command::Prepare(common) => {
            let exp = load(&common)?;
            print!("{}", cmd_prepare(&exp)?);
        }
        Command::Train(common) => {
            let exp = load(&common)?;
            let record = cmd_train(&exp)?;
            println!("{}: {}", record.spec.name, record.status.name());
            if let RunStatus::Diverged { epoch } = record.status {
                return Err(Error::Diverged { epoch });
            }
        }
        Command::Sweep { common, jobs } => {
            let exp = load(&common)?;
            let records = cmd_sweep(&exp, jobs)?;
            for r in &records {
                println!("{:<40} {}", r.spec.name, r.status.name());
            }
            if records.iter().any(|r| r.status != RunStatus::Ok) {
                return Ok(3);
            }
        }
        Command::Embed {
            common,
            select,
            split,
        } => {
            let exp = load(&common)?;
            let branch = branch_for(&exp, &select)?;
            let path = cmd_embed(&exp, &select.run, split.into(), branch)?;
            println!("{}", path.display());
        }
        Command::Probe { common, select } => {
            let exp = load(&common)?;
            let branch = branch_for(&exp, &select)?;
            let path = cmd_probe(&exp, &select.run, branch)?;
            print!(
                "{}",
                std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?
            );
        }
        Command::Verify { common, select } => {
            let exp = load(&common)?;
            let branch = branch_for(&exp, &select)?;
            let (report, path) = cmd_verify(&exp, &select.run, branch)?;
            println!(
                "roc_auc {:.4}  eer {:.4}  ({} genuine, {} impostor) -> {}",
                report.roc_auc,
                report.eer,
                report.n_genuine,
                report.n_impostor,
                path.display()
            );
        }
        Command::Report(common) => {
            let exp = load(&common)?;
            print!("{}", cmd_report(exp.out())?);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSEB_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
