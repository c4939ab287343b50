use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use embedfit::config::RunConfig;
use embedfit::formats;
use embedfit_core::inference::KMode;
use embedfit_core::net::EmbedNet;
use embedfit_core::trainer;

fn embedfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embedfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = embedfit(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

/// Small network and quick inference so the whole pipeline runs in seconds.
const TINY: &str = r#"
[train]
lr = 0.001
checkpoint_every = 1

[train.net]
width = 16
depth = 3

[inference.kmeans]
restarts = 3
"#;

fn tiny_run(dir: &Path, n_train: usize) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.to_str().unwrap();
    ok(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out,
        "--n-train",
        &n_train.to_string(),
        "--n-val",
        "4",
        "--n-test",
        "5",
        "--seed",
        "3",
    ]);
    cfg
}

#[test]
fn gen_data_desk_scale_counts() {
    let dir = tempfile::tempdir().unwrap();
    tiny_run(dir.path(), 20);
    assert_eq!(lines(&dir.path().join("train.jsonl")), 20);
    assert_eq!(lines(&dir.path().join("val.jsonl")), 4);
    assert_eq!(lines(&dir.path().join("test.jsonl")), 5);
    assert!(dir.path().join("config_gen-data.toml").exists());
}

#[test]
fn gen_data_default_counts() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gen-data", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(stdout.contains("train: 8000 samples"), "{stdout}");
    assert_eq!(lines(&dir.path().join("train.jsonl")), 8000);
    assert_eq!(lines(&dir.path().join("val.jsonl")), 200);
    assert_eq!(lines(&dir.path().join("test.jsonl")), 200);
}

#[test]
fn negative_sigma_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = embedfit(&["gen-data", "--out-dir", dir.path().to_str().unwrap(), "--sigma=-0.1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("noise_sigma"), "{err}");
    assert!(!dir.path().join("train.jsonl").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let out = embedfit(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn flags_override_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 5\n[data]\nn_train = 7\nn_val = 1\nn_test = 1\n").unwrap();
    ok(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let echoed = RunConfig::load(&dir.path().join("config_gen-data.toml")).unwrap();
    assert_eq!(echoed.seed, 11);
    assert_eq!(echoed.data.n_train, 7);
    assert_eq!(lines(&dir.path().join("train.jsonl")), 7);
}

#[test]
fn missing_dataset_is_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = embedfit(&["train", "--out-dir", dir.path().to_str().unwrap(), "--epochs", "1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.jsonl") && err.contains("not found"), "{err}");
}

#[test]
fn every_loss_flag_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 3);
    for loss in ["l2", "ce", "mimi", "maxinter", "minintra", "skmeans"] {
        let out = dir.path().join(loss);
        ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data-dir",
            dir.path().to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--loss",
            loss,
            "--epochs",
            "1",
        ]);
        assert!(out.join("model.json").exists());
    }
    let out = embedfit(&["train", "--loss", "hinge"]);
    assert!(!out.status.success());
}

#[test]
fn training_history_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 20);
    let d = dir.path().to_str().unwrap();
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", d, "--loss", "mimi", "--epochs", "30", "--seed", "3"]);
    let text = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), "epoch,train_loss,val_error,val_nmi");
    let losses: Vec<f64> = rows.map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 30);
    assert!(losses[29] < losses[0], "{losses:?}");
}

#[test]
fn resume_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 5);
    let (cfg, data) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    let common = |out: &Path| {
        vec![
            "train".to_string(),
            "--config".into(),
            cfg.into(),
            "--data-dir".into(),
            data.into(),
            "--out-dir".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let run = |out: &Path, extra: &[&str]| {
        let mut a = common(out);
        a.extend(extra.iter().map(|s| s.to_string()));
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    };
    run(&straight, &["--epochs", "4"]);
    run(&split, &["--epochs", "2"]);
    run(&split, &["--epochs", "4", "--resume"]);
    for f in ["model.json", "model_final.json", "history.csv"] {
        assert_eq!(
            fs::read(straight.join(f)).unwrap(),
            fs::read(split.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn eval_select_k_baseline_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 4);
    let (c, d) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    ok(&["train", "--config", c, "--out-dir", d, "--epochs", "2"]);

    ok(&["eval", "--config", c, "--out-dir", d]);
    let report = fs::read_to_string(dir.path().join("metrics_test.csv")).unwrap();
    assert_eq!(
        report.lines().next().unwrap(),
        "sample_id,K_true,K_est_sod,K_est_silh,error_rate,nmi,r_1,r_2,r_3,r_4,r_5,r_6,r_7,r_8"
    );
    assert_eq!(report.lines().count(), 6);

    let stdout = ok(&["select-k", "--config", c, "--out-dir", d]);
    assert!(stdout.contains("K recovered"));
    assert!(dir.path().join("select_k_test.csv").exists());

    for method in ["seq", "ho"] {
        ok(&["baseline", "--config", c, "--out-dir", d, "--method", method, "--iterations", "200"]);
        assert_eq!(lines(&dir.path().join(format!("baseline_{method}_test.csv"))), 6);
    }

    ok(&["export-embeddings", "--config", c, "--out-dir", d]);
    let exported = formats::read_embeddings(&dir.path().join("embeddings_test.csv")).unwrap();
    let test = formats::read_jsonl(&dir.path().join("test.jsonl")).unwrap();
    let total: usize = test.iter().map(|s| s.len()).sum();
    assert_eq!(exported.iter().map(|e| e.labels.len()).sum::<usize>(), total);
    for e in &exported {
        for row in e.embedding.row_iter() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    // re-imported embeddings reproduce the metrics exactly
    let run = RunConfig::load(&dir.path().join("config_eval.toml")).unwrap();
    let net: EmbedNet = formats::load_json(&dir.path().join("model.json")).unwrap();
    let direct = trainer::evaluate(&net, &test, KMode::GroundTruthK, &run.inference_config()).unwrap();
    let embeddings: Vec<_> = exported.into_iter().map(|e| e.embedding).collect();
    let again = trainer::evaluate_embeddings(&test, &embeddings, KMode::GroundTruthK, &run.inference_config()).unwrap();
    assert_eq!(direct, again);
}

#[test]
fn missing_model_is_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 2);
    let out = embedfit(&["eval", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
}
