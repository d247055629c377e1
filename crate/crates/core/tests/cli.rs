use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "preset": "desk",
  "train": {
    "encoder": {"model_dim": 16, "num_heads": 2, "ff_dim": 32, "pred_dim": 16, "num_blocks": 1},
    "batch_size": 8, "steps": 6, "eval_every": 3, "warmup_steps": 2,
    "queue": {"capacity": 32, "init_count": 8}
  },
  "data": {"synthetic": {"num_sentences": 200}, "holdout": 60, "eval_pairs": 30}
}"#;

fn mocose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mocose")).args(args).env_remove("MOCOSE_OUT_DIR").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn train(config: &str, out: &Path, seed: &str) -> Output {
    mocose(&["train", "--config", config, "--seed", seed, "--no-timestamp", "--out", out.to_str().unwrap()])
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mocose(&[]).status.code(), Some(2));
    assert_eq!(mocose(&["fly"]).status.code(), Some(2));
    assert_eq!(mocose(&["train"]).status.code(), Some(2));
}

#[test]
fn bad_config_exits_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"train": {"steps": 0}}"#);
    let out = train(&cfg, tmp.path(), "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
}

#[test]
fn missing_config_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(tmp.path().join("absent.json").to_str().unwrap(), tmp.path(), "1");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.json", TINY);
    let out = tmp.path().join("run");
    let status = train(&cfg, &out, "3");
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "step,loss,eta,mtd,alignment,uniformity,eval_spearman,collapse_score");
    let steps: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["3", "6"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["steps_run"], 6);
    assert!(std::fs::read(out.join("final.ckpt")).unwrap().starts_with(b"MCSE"));

    let other = tmp.path().join("other");
    assert!(train(&cfg, &other, "4").status.success());
    assert_ne!(std::fs::read(out.join("final.ckpt")).unwrap(), std::fs::read(other.join("final.ckpt")).unwrap());
}

#[test]
fn timestamp_line_is_optional() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.json", TINY);
    let out = tmp.path().join("run");
    let status = mocose(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(status.status.success());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# generated_unix="));
}

#[test]
fn mtd_table_prints_grid() {
    let out = mocose(&["mtd-table", "--eta", "0.85", "--queue", "512", "--batch", "64,128"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text, "eta,queue,batch,mtd\n0.85,512,64,14.67\n0.85,512,128,10.67\n");
}

#[test]
fn sweep_rejects_unknown_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "s.json", r#"{"axes": [{"parameter": "momentum", "values": [1]}], "seeds": [0]}"#);
    let out = mocose(&["sweep", "--sweep", &spec, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn sweep_writes_one_row_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = format!(r#"{{"base": {TINY}, "axes": [{{"parameter": "tau", "values": [0.05, 0.1]}}], "seeds": [0, 1]}}"#);
    let spec = write(tmp.path(), "s.json", &spec);
    let out = mocose(&["sweep", "--sweep", &spec, "--jobs", "2", "--no-timestamp", "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("tau,0.05,0,") && rows[3].starts_with("tau,0.1,1,"), "{csv}");
}
