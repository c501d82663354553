use std::path::Path;
use std::process::{Command, Output};

use cir_core::checkpoint::Checkpoint;
use cir_core::dataset::{load_counterfactuals, Dataset, Split};
use cir_core::eval::Metrics;

fn cir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cir")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cir(args);
    assert!(
        out.status.success(),
        "cir {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_mine_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (spec, cfg) = (tmp.path().join("spec.json"), tmp.path().join("train.json"));
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    std::fs::write(
        &spec,
        r#"{"train_queries": 16, "family_size": 5, "val_gallery": 10, "test_gallery": 10, "seed": 2}"#,
    )
    .unwrap();
    std::fs::write(
        &cfg,
        r#"{"batch_size": 4, "max_epochs": 1, "seed": 1, "model": {"encoder": {"d": 16, "heads": 2}}}"#,
    )
    .unwrap();

    ok(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    let dataset = Dataset::load(&data).unwrap();
    assert_eq!(dataset.split_queries(Split::Train).count(), 16);
    for f in ["vocab.txt", "images.btsr", "manifest.jsonl", "dataset.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    ok(&["mine", "--data", s(&data), "--config", s(&cfg)]);
    assert_eq!(load_counterfactuals(&data).unwrap().len(), 16);

    let printed: Metrics = serde_json::from_str(&ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)])).unwrap();
    assert_eq!(printed.recall_at_k.keys().copied().collect::<Vec<_>>(), vec![1, 10, 50]);
    assert_eq!(printed.loss_curve.len(), 1);
    let on_disk: Metrics = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(on_disk, printed);

    let ckpt = run.join("final.ckpt");
    assert_eq!(Checkpoint::load(&ckpt).unwrap().epoch, 1);
    let eval = |split: &str| ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", split]);
    let test: Metrics = serde_json::from_str(&eval("test")).unwrap();
    assert_eq!(test, printed);
    assert_eq!(eval("test"), eval("test"));
    let val: Metrics = serde_json::from_str(&eval("val")).unwrap();
    assert_eq!(val.recall_at_k.len(), 3);

    assert!(!cir(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "holdout"]).status.success());
}

#[test]
fn train_without_sidecar_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let (spec, cfg, data) = (tmp.path().join("spec.json"), tmp.path().join("c.json"), tmp.path().join("d"));
    std::fs::write(&spec, r#"{"train_queries": 8, "family_size": 5, "val_gallery": 5, "test_gallery": 5}"#).unwrap();
    std::fs::write(&cfg, r#"{"batch_size": 4, "max_epochs": 1}"#).unwrap();
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    let out = cir(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sidecar"));
}

#[test]
fn grad_check_module() {
    let out = ok(&["grad-check", "--module", "attention"]);
    let rows: Vec<&str> = out.lines().collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.starts_with("ok")), "{out}");
    assert!(!cir(&["grad-check", "--module", "nonsense"]).status.success());
}
