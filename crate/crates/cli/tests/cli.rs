use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shield_core::explain::{ExplainParams, Explanation};
use shield_core::harness::reports::{read_csv, read_json, MetricRow, PosteriorReport, SummaryRow};
use shield_core::harness::{DatasetSpec, ExperimentConfig};
use shield_core::model::Architecture;
use shield_core::revel::MetricParams;
use shield_core::trainer::TrainLog;

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny".into(),
        seed: 3,
        model: Architecture::Mlp { hidden: 8 },
        epochs: 2,
        lambdas: vec![0.0, 25.0],
        grid_rows: 4,
        grid_cols: 4,
        dataset: DatasetSpec::Synth {
            classes: shield_core::data::ShapeKind::ALL[..3].to_vec(),
            size: 8,
            train_size: 48,
            test_size: 24,
            noise: 0.1,
            seed: 0,
        },
        explain: MetricParams {
            explain: ExplainParams {
                samples: 40,
                repeats: 2,
                ..Default::default()
            },
            fidelity_samples: 5,
        },
        metric_examples: 6,
        mc_samples: 2000,
        simplex_dump: 10,
        ..Default::default()
    }
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml().unwrap()).unwrap();
    path
}

fn shield(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shield"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove(shield_core::harness::ARTIFACT_ROOT_ENV)
        .output()
        .unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn run_all_writes_the_artifact_tree() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let out = shield(&["run-all", "--config", config.to_str().unwrap(), "--out", "exp"], dir.path());
    assert_ok(&out);
    let exp = dir.path().join("exp");
    let summary = read_csv::<SummaryRow>(&exp.join("summary.csv")).unwrap();
    assert_eq!(summary.len(), 2);
    let metrics = read_csv::<MetricRow>(&exp.join("metrics.csv")).unwrap();
    assert_eq!(metrics.len(), 12);
    let post: PosteriorReport = read_json(&exp.join("posteriors.json")).unwrap();
    assert_eq!(post.pooled.len(), 5);
    for lambda in ["0", "25"] {
        let run = exp.join("runs").join(format!("lambda_{lambda}"));
        assert!(run.join("checkpoint.bin").is_file());
        assert!(run.join("manifest.json").is_file());
        let log = TrainLog::read_csv(std::fs::File::open(run.join("trainlog.csv")).unwrap()).unwrap();
        assert_eq!(log.records.len(), 2);
    }
    assert!(exp.join("simplex_robustness.csv").is_file());
}

#[test]
fn individual_verbs_chain() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let config = config.to_str().unwrap();
    for (lambda, out) in [("0", "base"), ("25", "treated")] {
        assert_ok(&shield(&["train", "--config", config, "--lambda", lambda, "--out", out], dir.path()));
    }
    assert!(dir.path().join("base/checkpoint.bin").is_file());

    // λ comes from the sibling manifest when not given
    assert_ok(&shield(
        &["metrics", "--config", config, "--checkpoint", "base/checkpoint.bin", "--out", "base.csv"],
        dir.path(),
    ));
    assert_ok(&shield(
        &[
            "metrics",
            "--config",
            config,
            "--checkpoint",
            "treated/checkpoint.bin",
            "--examples",
            "6",
            "--out",
            "treated.csv",
        ],
        dir.path(),
    ));
    let treated = read_csv::<MetricRow>(&dir.path().join("treated.csv")).unwrap();
    assert_eq!(treated.len(), 6);
    assert!(treated.iter().all(|r| r.lambda_pct == 25.0));

    assert_ok(&shield(
        &[
            "compare",
            "--baseline",
            "base.csv",
            "--treated",
            "treated.csv",
            "--mc-samples",
            "2000",
            "--out",
            "post.json",
            "--simplex-dir",
            "simplex",
        ],
        dir.path(),
    ));
    let post: PosteriorReport = read_json(&dir.path().join("post.json")).unwrap();
    assert!(post.pooled.iter().all(|s| s.n == 6));
    assert!(dir.path().join("simplex/simplex_local_fidelity.csv").is_file());

    let out = shield(
        &["explain", "--config", config, "--checkpoint", "base/checkpoint.bin", "--example", "2"],
        dir.path(),
    );
    assert_ok(&out);
    let e: Explanation = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(e.a().len(), 16);
    assert_eq!(e.b().len(), 3);
}

#[test]
fn explain_rejects_an_out_of_range_example() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let config = config.to_str().unwrap();
    assert_ok(&shield(&["train", "--config", config, "--lambda", "0", "--out", "run"], dir.path()));
    let out = shield(
        &["explain", "--config", config, "--checkpoint", "run/checkpoint.bin", "--example", "24"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside"));
}

#[test]
fn invalid_config_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "epochs = 0\n").unwrap();
    let out = shield(&["run-all", "--config", path.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    std::fs::write(&path, "no_such_field = 1\n").unwrap();
    let out = shield(&["train", "--config", path.to_str().unwrap()], dir.path());
    assert!(!out.status.success());

    let out = shield(&["train", "--config", "missing.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
}

#[test]
fn artifact_root_sets_the_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config());
    let root = dir.path().join("artifacts_here");
    let out = Command::new(env!("CARGO_BIN_EXE_shield"))
        .args(["train", "--config", config.to_str().unwrap(), "--epochs", "1"])
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .env(shield_core::harness::ARTIFACT_ROOT_ENV, &root)
        .output()
        .unwrap();
    assert_ok(&out);
    // the first positive λ is the default
    let log = root.join("tiny/runs/lambda_25/trainlog.csv");
    assert_eq!(TrainLog::read_csv(std::fs::File::open(log).unwrap()).unwrap().records.len(), 1);
}
