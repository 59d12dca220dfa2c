use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sbal(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sbal"));
    cmd.current_dir(dir).args(args).env("RUST_LOG", "warn").env_remove("SBAL_DATA_ROOT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

const STUDY: &str = r#"
schema_version = 1
n_init = 2
cycles = 2
seeds = [0, 1]
output_dir = "runs"

[dataset]
kind = "directory"
spacing = 1.0
size = [8, 8]

[model]
depth = 1
base_channels = 2

[train]
epochs = 2
iters_per_epoch = 2
warmup_epochs = 1

[selection]
budget = 2

[[methods]]
strategy = "random"

[[methods]]
strategy = "stochastic_batch"
scorer = "entropy"
"#;

#[test]
fn run_report_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("study.toml"), STUDY).unwrap();
    assert!(sbal(dir, &["synth", "--out", "data", "--volumes", "5", "--slices", "4", "--size", "8"], &[]).status.success());

    // no dataset root anywhere: fails without leaving state behind
    let missing = sbal(dir, &["run", "--config", "study.toml"], &[]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("root"));
    let wrong = sbal(dir, &["run", "--config", "study.toml"], &[("SBAL_DATA_ROOT", "nowhere")]);
    assert!(!wrong.status.success());
    assert!(!dir.join("runs").exists());

    let dry = sbal(dir, &["run", "--config", "study.toml", "--dry-run", "--seed", "3"], &[("SBAL_DATA_ROOT", "data")]);
    assert!(dry.status.success());
    let plan = String::from_utf8_lossy(&dry.stdout);
    assert!(plan.contains("entropy+sb-s3") && plan.contains("labelled 2 4 6") && !plan.contains("-s0"));
    assert!(!dir.join("runs").exists());

    let bad = sbal(dir, &["run", "--config", "study.toml", "--set", "train.epoch=3"], &[("SBAL_DATA_ROOT", "data")]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("epoch"));

    assert!(sbal(dir, &["run", "--config", "study.toml"], &[("SBAL_DATA_ROOT", "data")]).status.success());
    assert!(sbal(dir, &["report", "--results", "runs"], &[]).status.success());
    let first = fs::read(dir.join("runs/report/table.tsv")).unwrap();
    let first_json = fs::read(dir.join("runs/report/summary.json")).unwrap();
    assert!(sbal(dir, &["report", "--results", "runs"], &[]).status.success());
    assert_eq!(fs::read(dir.join("runs/report/table.tsv")).unwrap(), first);
    assert_eq!(fs::read(dir.join("runs/report/summary.json")).unwrap(), first_json);

    assert!(sbal(dir, &["plot", "--results", "runs", "--out", "curve.svg"], &[]).status.success());
    assert!(fs::read_to_string(dir.join("curve.svg")).unwrap().starts_with("<svg"));
    assert!(!sbal(dir, &["plot", "--results", "runs", "--metric", "3d_iou", "--out", "x.svg"], &[]).status.success());

    let score = sbal(dir, &["score", "--table", "runs/entropy+sb-s0/scores/cycle_001.tsv", "--budget", "2", "--strategy", "topk"], &[]);
    assert!(score.status.success());
    assert!(String::from_utf8_lossy(&score.stdout).contains("sample_ids"));

    fs::create_dir(dir.join("empty")).unwrap();
    assert!(!sbal(dir, &["report", "--results", "empty"], &[]).status.success());
}
