use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nbvae::models::{save_checkpoint, Model, ModelConfig, Variant};
use nbvae::sparse_data::{save_bow, SparseCountMatrix};
use serde_json::Value;

fn nbvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a synthetic dataset and returns the path of its config after
/// applying `edit` to it.
fn synthetic(dir: &Path, kind: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let data = dir.join("data");
    let out = nbvae(&[
        "prepare",
        "--synthetic",
        kind,
        "--out",
        s(&data),
        "--seed",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let path = data.join("config.json");
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    edit(&mut cfg);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn short_run(cfg: &mut Value) {
    cfg["train"]["max_epochs"] = 3.into();
}

#[test]
fn tiny_run_writes_all_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "nb-mixture", short_run);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = nbvae(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(run.status.code(), Some(0), "{}", text(&run));
    }
    for f in [
        "checkpoint/manifest.json",
        "checkpoint/params.bin",
        "history.csv",
        "report.json",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    // Only the output directory differs between the two resolved configs.
    let resolved = |d: &Path| -> Value {
        let mut v: Value =
            serde_json::from_str(&fs::read_to_string(d.join("resolved_config.json")).unwrap())
                .unwrap();
        v["output_dir"] = Value::Null;
        v
    };
    assert_eq!(resolved(&a), resolved(&b));
    assert_eq!(resolved(&a)["model"]["input_dim"], 50);
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("step,epoch,elbo,kl,beta,validation_metric\n"));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert!(report["metrics"]["perplexity"]
        .as_f64()
        .unwrap()
        .is_finite());
    assert_eq!(report["checkpoint"].as_str().unwrap().len(), 64);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "nb-mixture", short_run);
    let first = dir.path().join("first");
    let run = nbvae(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&first),
        "--seed",
        "11",
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", text(&run));
    let resolved = first.join("resolved_config.json");
    let second = dir.path().join("second");
    let run = nbvae(&["train", "--config", s(&resolved), "--out", s(&second)]);
    assert_eq!(run.status.code(), Some(0), "{}", text(&run));
    assert_eq!(
        fs::read(first.join("checkpoint/params.bin")).unwrap(),
        fs::read(second.join("checkpoint/params.bin")).unwrap()
    );
}

#[test]
fn evaluate_matches_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "implicit", |c| {
        c["train"]["max_epochs"] = 2.into();
    });
    let run_dir = dir.path().join("run");
    let run = nbvae(&["train", "--config", s(&cfg), "--out", s(&run_dir)]);
    assert_eq!(run.status.code(), Some(0), "{}", text(&run));
    let eval_dir = dir.path().join("eval");
    let ev = nbvae(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&run_dir.join("checkpoint")),
        "--out",
        s(&eval_dir),
    ]);
    assert_eq!(ev.status.code(), Some(0), "{}", text(&ev));
    assert!(text(&ev).contains("ndcg@10"));
    assert_eq!(
        fs::read_to_string(run_dir.join("report.json")).unwrap(),
        fs::read_to_string(eval_dir.join("report.json")).unwrap()
    );
}

#[test]
fn missing_data_path_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "nb-mixture", |c| {
        c["data"]["validation"] = "nowhere/missing.txt".into();
    });
    let run = nbvae(&["train", "--config", s(&cfg)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(text(&run).contains("missing.txt"), "{}", text(&run));
    assert!(text(&run).contains("data.validation"));
}

#[test]
fn unknown_keys_and_metrics_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "nb-mixture", |c| {
        c["train"]["learning_rat"] = 0.1.into();
    });
    let run = nbvae(&["train", "--config", s(&cfg)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(text(&run).contains("learning_rat"), "{}", text(&run));

    let cfg = synthetic(dir.path(), "nb-mixture", |c| {
        c["eval"]["metrics"] = serde_json::json!(["auc"]);
    });
    let model = Model::new(ModelConfig::new(Variant::Nbvae, 50, 4)).unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let ev = nbvae(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(ev.status.code(), Some(2));
    assert!(text(&ev).contains("auc"));
}

#[test]
fn variant_modality_mismatch_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "nb-mixture", |c| {
        c["model"]["variant"] = "nbvae_b".into();
    });
    let run = nbvae(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn evaluate_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "nb-mixture", short_run);
    let model = Model::new(ModelConfig::new(Variant::Nbvae, 49, 4)).unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let ev = nbvae(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(ev.status.code(), Some(2), "{}", text(&ev));
    assert!(text(&ev).contains("49"));
}

#[test]
fn uniform_checkpoint_has_perplexity_v() {
    let dir = tempfile::tempdir().unwrap();
    let rows = (0..30u32)
        .map(|j| {
            (0..10u32)
                .map(|k| ((j * 7 + k * 13) % 100, 1 + k % 3))
                .collect()
        })
        .collect();
    let data = SparseCountMatrix::from_rows(100, rows).unwrap();
    save_bow(&data, &dir.path().join("docs.txt")).unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(
        &cfg,
        r#"{"model": {"variant": "multivae", "latent_dim": 4},
            "data": {"modality": "counts", "train": "docs.txt", "validation": "docs.txt"}}"#,
    )
    .unwrap();
    let mut config = ModelConfig::new(Variant::Multivae, 100, 4);
    config.seed = 2;
    let mut model = Model::new(config).unwrap();
    model.params.zero_output_heads();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let out = dir.path().join("eval");
    let ev = nbvae(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
    ]);
    assert_eq!(ev.status.code(), Some(0), "{}", text(&ev));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let p = report["metrics"]["perplexity"].as_f64().unwrap();
    assert!((p - 100.0).abs() < 1e-6, "{p}");
}

#[test]
fn predict_writes_one_line_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "multilabel", |c| {
        c["train"]["max_epochs"] = 1.into();
    });
    let run_dir = dir.path().join("run");
    let run = nbvae(&["train", "--config", s(&cfg), "--out", s(&run_dir)]);
    assert_eq!(run.status.code(), Some(0), "{}", text(&run));
    let pred = dir.path().join("pred.jsonl");
    let out = nbvae(&[
        "predict",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&run_dir.join("checkpoint")),
        "--out",
        s(&pred),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let lines: Vec<String> = fs::read_to_string(&pred)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 500);
    let first: Value = serde_json::from_str(&lines[0]).unwrap();
    let top = first["top"].as_array().unwrap();
    assert_eq!(top.len(), 5);
    let scores: Vec<f64> = top.iter().map(|t| t["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn prepare_materializes_the_heldout_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "nb-mixture", |_| {});
    let out = dir.path().join("prepared");
    let run = nbvae(&["prepare", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(0), "{}", text(&run));
    for f in [
        "validation.observed.txt",
        "validation.heldout.txt",
        "test.observed.txt",
        "test.heldout.txt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let ok = nbvae(&["gradcheck", "--seeds", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", text(&ok));
    assert!(text(&ok).contains("lgamma"));
    let bad = nbvae(&["gradcheck", "--seeds", "1", "--inject-fault", "sigmoid"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(text(&bad).contains("failed for: sigmoid"), "{}", text(&bad));
}

#[test]
fn bad_arguments_exit_with_config_error() {
    assert_eq!(nbvae(&["train"]).status.code(), Some(2));
    assert_eq!(nbvae(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nbvae(&["--help"]).status.code(), Some(0));
}
