use std::path::Path;
use std::process::{Command, Output};

fn dseb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dseb"))
        .args(args)
        .env("DSEB_LOG", "warn")
        .output()
        .unwrap()
}

fn smoke_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/smoke.conf")
        .display()
        .to_string()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(dseb(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn bad_config_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "train.epochs = many\n").unwrap();
    let out = dseb(&["prepare", "--config", config.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_manifest_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("manifest.conf");
    std::fs::write(
        &config,
        "dataset.kind = manifest\ndataset.manifest = nowhere.tsv\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = dseb(&[
        "prepare",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn training_without_prepared_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dseb(&[
        "train",
        "--config",
        &smoke_config(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn smoke_sweep_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (config, out) = (smoke_config(), dir.path().to_str().unwrap().to_string());
    for step in [
        &["prepare"][..],
        &["sweep", "--jobs", "2"],
        &["verify"],
        &["report"],
    ] {
        let mut args: Vec<&str> = step.to_vec();
        args.extend(["--config", &config, "--out", &out]);
        let result = dseb(&args);
        assert_eq!(
            result.status.code(),
            Some(0),
            "{step:?}: {}",
            String::from_utf8_lossy(&result.stderr)
        );
    }
    assert!(dir.path().join("report/report.txt").exists());
    assert_eq!(
        std::fs::read_dir(dir.path().join("runs")).unwrap().count(),
        4
    );
}
