use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dseb::autodiff::Tensor;
use dseb::data::ExclusionReason;
use dseb::experiment::{
    cmd_prepare, cmd_probe, cmd_sweep, cmd_train, cmd_verify, data_dir, probe_embeddings,
    read_embeddings, sweep_grid, write_embeddings, Branch, Embeddings, Experiment, PreparedData,
    RawConfig, RunStatus,
};
use dseb::models::TrainMode;

const TINY: &str = "seed = 3
dataset.kind = synth
dataset.split_ratios = 0.6, 0.2, 0.2
synth.n_speakers = 120
synth.utterances_per_speaker = 3
synth.frames_per_utterance = 4
model.hidden = 32
model.embed_dim = 16
model.projection_hidden = 16
model.projection_dim = 8
train.epochs = 1
train.bottleneck_epochs = 1
train.batch_size = 16
probe.epochs = 5
probe.seeds = 0, 1
probe.resamples = 20
";

fn experiment(overrides: &[(&str, &str)], out: &Path) -> Experiment {
    let mut raw = RawConfig::parse(TINY).unwrap();
    for (k, v) in overrides {
        raw.set(k, *v);
    }
    raw.set("output", out.display().to_string());
    Experiment::from_raw(raw, Path::new(".")).unwrap()
}

fn lambda_cells(csv: &str) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}

#[test]
fn full_grid_has_twenty_one_points() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(
        &[
            ("model.embed_dim", "128"),
            ("sweep.lambdas", "0.2, 0.5, 1.0, 2.0, 5.0"),
            ("sweep.ks", "32, 64, 76, 88, 100"),
            (
                "sweep.triples",
                "0.01:0.01:0.01; 0.1:0.01:0.01; 0.5:0.05:0.05",
            ),
        ],
        dir.path(),
    );
    let grid = sweep_grid(&exp.cfg);
    assert_eq!(grid.len(), 21);
    assert_eq!(
        grid.iter()
            .filter(|s| matches!(s.mode, TrainMode::Adversarial { .. }))
            .count(),
        5
    );
    assert_eq!(
        grid.iter()
            .filter(|s| matches!(s.mode, TrainMode::Bottleneck(_)))
            .count(),
        15
    );
    let names: std::collections::BTreeSet<_> = grid.iter().map(|s| s.name.clone()).collect();
    assert_eq!(names.len(), 21);
}

#[test]
fn empty_sweep_trains_only_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(
        &[
            ("sweep.lambdas", ""),
            ("sweep.ks", ""),
            ("sweep.triples", ""),
        ],
        dir.path(),
    );
    cmd_prepare(&exp).unwrap();
    let records = cmd_sweep(&exp, 1).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].spec.name, "baseline");
    assert_eq!(records[0].status, RunStatus::Ok);

    let report = dir.path().join("report");
    let verification = fs::read_to_string(report.join("verification.csv")).unwrap();
    assert_eq!(verification.lines().count(), 2);
    let probes = fs::read_to_string(report.join("probes.csv")).unwrap();
    assert_eq!(probes.lines().count(), 4);
}

#[test]
fn adversarial_report_lists_each_lambda_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(
        &[
            ("sweep.lambdas", "0.2, 0.5, 1.0, 2.0, 5.0"),
            ("sweep.ks", ""),
            ("sweep.triples", ""),
        ],
        dir.path(),
    );
    cmd_prepare(&exp).unwrap();
    cmd_sweep(&exp, 2).unwrap();
    let csv = fs::read_to_string(dir.path().join("report/adversarial_verification.csv")).unwrap();
    let cells = lambda_cells(&csv);
    let values: Vec<f64> = cells.iter().map(|c| c.parse().unwrap()).collect();
    assert_eq!(values, [0.2, 0.5, 1.0, 2.0, 5.0]);
}

#[test]
fn prepare_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        cmd_prepare(&experiment(&[], d.path())).unwrap();
    }
    let read = |root: &Path| -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(data_dir(root))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    fs::read(e.path()).unwrap(),
                )
            })
            .collect()
    };
    let (first, second) = (read(a.path()), read(b.path()));
    assert!(first.len() >= 5);
    assert_eq!(first, second);
}

fn manifest_fixture(dir: &Path) -> std::path::PathBuf {
    let mut text = String::from("client_id\tpath\tgender\tage\taccents\n");
    let genders = ["male_masculine", "female_feminine"];
    let ages = ["twenties", "forties", "sixties"];
    let accents = [
        "United States English",
        "England English",
        "Canadian English",
    ];
    for s in 0..14 {
        for u in 0..2 {
            text.push_str(&format!(
                "spk{s}\tclips/{s}_{u}.wav\t{}\t{}\t{}\n",
                genders[s % 2],
                ages[s % 3],
                accents[s % 3]
            ));
        }
    }
    text.push_str("nb\tclips/nb_0.wav\tnon-binary\ttwenties\tUnited States English\n");
    text.push_str("nb\tclips/nb_1.wav\tnon-binary\ttwenties\tUnited States English\n");
    text.push_str("noage\tclips/na_0.wav\tmale\t\tEngland English\n");
    text.push_str("noage\tclips/na_1.wav\tmale\t\tEngland English\n");
    text.push_str("scot\tclips/sc_0.wav\tfemale\tthirties\tScottish English\n");
    text.push_str("scot\tclips/sc_1.wav\tfemale\tthirties\tScottish English\n");
    text.push_str("once\tclips/on_0.wav\tfemale\tthirties\tUnited States English\n");
    text.push_str("flip\tclips/fl_0.wav\tmale\tthirties\tUnited States English\n");
    text.push_str("flip\tclips/fl_1.wav\tfemale\tthirties\tUnited States English\n");
    let path = dir.join("validated.tsv");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn manifest_exclusions_are_recorded_with_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = manifest_fixture(dir.path());
    let (manifest, root) = (
        manifest.display().to_string(),
        dir.path().display().to_string(),
    );
    let exp = experiment(
        &[
            ("dataset.kind", "manifest"),
            ("dataset.manifest", &manifest),
            ("dataset.audio_root", &root),
        ],
        &dir.path().join("out"),
    );
    cmd_prepare(&exp).unwrap();
    let data = PreparedData::read(&data_dir(exp.out())).unwrap();
    assert_eq!(data.speakers.len(), 14);
    let reasons: BTreeMap<&str, ExclusionReason> = data
        .exclusions
        .iter()
        .map(|e| (e.speaker_id.as_str(), e.reason))
        .collect();
    assert_eq!(reasons["nb"], ExclusionReason::GenderOutOfScope);
    assert_eq!(reasons["noage"], ExclusionReason::AgeMissing);
    assert_eq!(reasons["scot"], ExclusionReason::AccentOutOfScope);
    assert_eq!(reasons["once"], ExclusionReason::TooFewUtterances);
    assert_eq!(reasons["flip"], ExclusionReason::ConflictingMetadata);
    assert_eq!(reasons.len(), 5);
}

#[test]
fn single_baseline_run_reports_one_row_per_attribute() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&[], dir.path());
    cmd_prepare(&exp).unwrap();
    assert_eq!(cmd_train(&exp).unwrap().status, RunStatus::Ok);
    let probes = fs::read_to_string(cmd_probe(&exp, "baseline", Branch::Full).unwrap()).unwrap();
    let test_rows: Vec<&str> = probes.lines().filter(|l| l.contains(",test,")).collect();
    assert_eq!(test_rows.len(), 3, "{probes}");
    let (report, path) = cmd_verify(&exp, "baseline", Branch::Full).unwrap();
    assert!((0.0..=1.0).contains(&report.roc_auc));
    let verify = fs::read_to_string(path).unwrap();
    assert_eq!(
        verify.lines().filter(|l| l.starts_with("all,all,")).count(),
        1
    );
}

#[test]
fn probing_mismatched_dims_names_both_sides() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&[], dir.path());
    cmd_prepare(&exp).unwrap();
    let data = PreparedData::read(&data_dir(exp.out())).unwrap();
    let ids: Vec<String> = data
        .utterances
        .iter()
        .take(4)
        .map(|u| u.id.clone())
        .collect();
    let narrow = Embeddings::new(
        Branch::Full,
        ids.clone(),
        &Tensor::matrix(4, 3, vec![0.5; 12]).unwrap(),
    )
    .unwrap();
    let wide = Embeddings::new(
        Branch::Full,
        ids,
        &Tensor::matrix(4, 5, vec![0.5; 20]).unwrap(),
    )
    .unwrap();
    let err = probe_embeddings(&data, &exp.cfg, ("val", &narrow), &[("test", &wide)])
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("val has 3") && err.contains("test has 5"),
        "{err}"
    );
}

#[test]
fn embeddings_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = Tensor::matrix(3, 2, vec![0.25, -1.5, 3.0, 1e-300, -0.0, 7.125]).unwrap();
    let ids = vec!["a".to_string(), "utt two".to_string(), "ü".to_string()];
    let original = Embeddings::new(Branch::Residual, ids, &matrix).unwrap();
    let path = dir.path().join("nested/r.demb");
    write_embeddings(&path, &original).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back, original);
    assert_eq!(back.select(&["ü", "a"]).unwrap().row(0), &[-0.0, 7.125]);
}

#[test]
fn training_before_prepare_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&[], dir.path());
    let err = cmd_train(&exp).unwrap_err().to_string();
    assert!(err.contains("prepare"), "{err}");
    assert!(!dir.path().join("runs").exists());
}
