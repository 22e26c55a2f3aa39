use std::path::Path;
use std::process::{Command, Output};

fn jointda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointda"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const SMALL_RUN: &str = r#"{
  "schema": 1,
  "objective": "dann_ss",
  "steps": 60,
  "pretrain_steps": 60,
  "log_every": 20,
  "validation_size": 100,
  "seeds": [4],
  "data": {"source_train": 300, "source_test": 50, "target_train": 300, "target_val": 100, "target_test": 200}
}"#;

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = jointda(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = jointda(dir.path(), &["train", "--config", "absent/run.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent/run.json"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"schema": 1, "steps": 5, "colour": 2}"#).unwrap();
    let o = jointda(dir.path(), &["train", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    std::fs::write(dir.path().join("s.json"), r#"{"schema": 9}"#).unwrap();
    assert_eq!(jointda(dir.path(), &["select", "--config", "s.json"]).status.code(), Some(1));
}

#[test]
fn landscape_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = jointda(dir.path(), &["landscape", "--gamma-inv", "0.3", "--out", "d/"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let d = dir.path().join("d");
    assert_eq!(first_line(&d.join("curve.csv")), "alpha,value");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("landscape.json")).unwrap()).unwrap();
    assert_eq!(summary["classes"], 2);
    assert!(summary["max"].as_f64().unwrap().abs() < 0.02);
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = jointda(dir.path(), &["gradcheck", "--points", "10", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/gradcheck.json")).unwrap()).unwrap();
    let cases = r["cases"].as_array().unwrap();
    assert_eq!(cases.len(), jointda_core::audit::case_names().len());
    assert!(cases.iter().all(|c| c["max_rel_error"].as_f64().unwrap() < 1e-4));
}

#[test]
fn train_then_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), SMALL_RUN).unwrap();
    let o = jointda(dir.path(), &["train", "--config", "run.json", "--out", "t"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let t = dir.path().join("t");
    assert_eq!(first_line(&t.join("metrics_seed4.csv")), "step,loss_c,loss_d_or_aux,loss_f,entropy");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(t.join("summary.json")).unwrap()).unwrap();
    let trained = summary["runs"][0]["test"]["top1"].as_f64().unwrap();

    let o = jointda(
        dir.path(),
        &[
            "eval",
            "--config",
            "run.json",
            "--checkpoint",
            "t/model_seed4.ckpt",
            "--out",
            "e",
            "--format",
            "json",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let e: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("e/eval.json")).unwrap()).unwrap();
    // f32 storage may flip a borderline example at most
    assert!((e["top1"].as_f64().unwrap() - trained).abs() <= 1.0 / 200.0 + 1e-12);

    // a source-only shell has no augmented column
    std::fs::write(dir.path().join("so.json"), SMALL_RUN.replace("dann_ss", "source_only")).unwrap();
    let o = jointda(
        dir.path(),
        &["eval", "--config", "so.json", "--checkpoint", "t/model_seed4.ckpt", "--out", "e2"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), SMALL_RUN).unwrap();
    for out in ["a", "b"] {
        assert_eq!(
            jointda(dir.path(), &["train", "--config", "run.json", "--seed", "9", "--out", out])
                .status
                .code(),
            Some(0)
        );
    }
    for f in ["metrics_seed9.csv", "model_seed9.ckpt", "summary.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn warp_by_flow_file_and_shift() {
    let dir = tempfile::tempdir().unwrap();
    let mut pgm = b"P5\n4 3\n255\n".to_vec();
    pgm.extend((0u8..12).map(|v| v * 20));
    std::fs::write(dir.path().join("in.pgm"), &pgm).unwrap();
    let o = jointda(dir.path(), &["warp", "--image", "in.pgm", "--shift", "0", "1", "--out", "s"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let shifted = jointda::formats::read_pnm(&dir.path().join("s/warped.pgm")).unwrap();
    let src = jointda::formats::read_pnm(&dir.path().join("in.pgm")).unwrap();
    for x in 0..4 {
        assert_eq!(shifted.get(0, x, 0), 0.0);
        assert_eq!(shifted.get(2, x, 0), src.get(1, x, 0));
    }
    // replaying the written flow reproduces the output
    let o = jointda(dir.path(), &["warp", "--image", "in.pgm", "--flow", "s/flow.aflw", "--out", "f"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(dir.path().join("f/warped.pgm")).unwrap(),
        std::fs::read(dir.path().join("s/warped.pgm")).unwrap()
    );
}
