mod common;

use std::fs;
use std::path::Path;

use rfpose::cli::{best_path, losses_path, run};
use serde_json::Value;

fn rfpose(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["rfpose", "-q"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"embed_dim": 16, "encoder_blocks": 1, "heads": 2, "decoder_blocks": 1,
            "encoder_ffn_dim": 32, "decoder_ffn_dim": 16},
  "train": {"batch_size": 4, "total_epochs": 2, "warmup_epochs": 1}
}"#;

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(rfpose(&["bogus"]).0, 1);
    assert_eq!(rfpose(&["simulate", "--frames", "3"]).0, 1);
    assert_eq!(
        rfpose(&["eval", "--data", "x", "--ckpt", "y", "--subgroups", "a"]).0,
        1
    );
    assert_eq!(rfpose(&["--help"]).0, 0);
    assert_eq!(rfpose(&["--version"]).0, 0);
}

#[test]
fn missing_files_are_data_errors() {
    let dir = common::tempdir();
    let missing = dir.path().join("none");
    assert_eq!(
        rfpose(&["eval", "--data", p(&missing), "--ckpt", p(&missing)]).0,
        2
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"embed_dimm": 3}}"#).unwrap();
    assert_eq!(rfpose(&["params", "--config", p(&bad)]).0, 1);
}

#[test]
fn simulate_zero_frames() {
    let dir = common::tempdir();
    let out = dir.path().join("empty");
    let (code, stdout) = rfpose(&[
        "simulate",
        "--out",
        p(&out),
        "--frames",
        "0",
        "--max-persons",
        "4",
        "--seed",
        "1",
    ]);
    assert_eq!(code, 0);
    assert_eq!(json(&stdout)["frame_count"], 0);
    assert!(rfpose::dataset::read_dataset(&out).unwrap().is_empty());
}

#[test]
fn params_reports_component_counts() {
    let (code, stdout) = rfpose(&["params"]);
    assert_eq!(code, 0);
    let v = json(&stdout);
    assert_eq!(v["rf_encoder"], 826_240);
    assert_eq!(v["pose_estimator"], 369_169);
    assert_eq!(v["total"], 1_195_409);
    assert_eq!(v["tokens"], 380);
}

#[test]
fn gradcheck_passes() {
    let (code, stdout) = rfpose(&["gradcheck"]);
    assert_eq!(code, 0);
    assert_eq!(json(&stdout)["passed"], true);
}

#[test]
fn simulation_is_independent_of_threads() {
    let dir = common::tempdir();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |o: &Path, t: &str| {
        rfpose(&[
            "--threads",
            t,
            "simulate",
            "--out",
            p(o),
            "--frames",
            "5",
            "--seed",
            "4",
            "--snr-db",
            "15",
        ])
        .0
    };
    assert_eq!(args(&a, "1"), 0);
    assert_eq!(args(&b, "3"), 0);
    for name in ["manifest.json", "frames.bin", "labels.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn train_eval_predict_finetune() {
    let dir = common::tempdir();
    let data = dir.path().join("data");
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    assert_eq!(
        rfpose(&[
            "simulate",
            "--out",
            p(&data),
            "--frames",
            "6",
            "--seed",
            "2"
        ])
        .0,
        0
    );

    let first = dir.path().join("first.ckpt");
    let second = dir.path().join("second.ckpt");
    let (code, stdout) = rfpose(&[
        "--threads",
        "1",
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&first),
    ]);
    assert_eq!(code, 0);
    let report = json(&stdout);
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 2);
    assert_eq!(report["per_joint"].as_array().unwrap().len(), 8);
    assert!(best_path(&first).exists());
    let csv = fs::read_to_string(losses_path(&first)).unwrap();
    assert!(csv.starts_with("epoch,lr,loss\n"));
    assert_eq!(csv.lines().count(), 3);

    assert_eq!(
        rfpose(&[
            "--threads",
            "1",
            "train",
            "--data",
            p(&data),
            "--config",
            p(&cfg),
            "--out",
            p(&second)
        ])
        .0,
        0
    );
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    assert_eq!(
        fs::read(losses_path(&first)).unwrap(),
        fs::read(losses_path(&second)).unwrap()
    );

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--data", p(&data), "--ckpt", p(&first)];
        args.extend_from_slice(extra);
        rfpose(&args)
    };
    let (code, full) = eval(&[]);
    assert_eq!(code, 0);
    assert_eq!(eval(&["--subgroups", "0,1,2,3"]).1, full);
    let (code, one) = eval(&["--subgroups", "0"]);
    assert_eq!(code, 0);
    assert_eq!(json(&one)["per_joint"].as_array().unwrap().len(), 8);
    assert_eq!(eval(&["--subgroups", "4"]).0, 1);
    assert_eq!(eval(&["--threshold", "0"]).0, 1);

    let (code, pred) = rfpose(&[
        "predict",
        "--ckpt",
        p(&first),
        "--data",
        p(&data),
        "--frame",
        "1",
    ]);
    assert_eq!(code, 0);
    assert_eq!(json(&pred)["class_prob"].as_array().unwrap().len(), 15);
    assert_eq!(
        rfpose(&[
            "predict",
            "--ckpt",
            p(&first),
            "--data",
            p(&data),
            "--frame",
            "6"
        ])
        .0,
        1
    );

    let tuned = dir.path().join("tuned.ckpt");
    let (code, _) = rfpose(&[
        "finetune",
        "--data",
        p(&data),
        "--init",
        p(&first),
        "--config",
        p(&cfg),
        "--out",
        p(&tuned),
    ]);
    assert_eq!(code, 0, "a supervised checkpoint is a valid warm start");

    let wide = dir.path().join("wide.json");
    fs::write(
        &wide,
        TINY.replace("\"embed_dim\": 16", "\"embed_dim\": 32"),
    )
    .unwrap();
    let (code, _) = rfpose(&[
        "finetune",
        "--data",
        p(&data),
        "--init",
        p(&first),
        "--config",
        p(&wide),
        "--out",
        p(&tuned),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn pretrain_then_finetune() {
    let dir = common::tempdir();
    let data = dir.path().join("data");
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    assert_eq!(
        rfpose(&[
            "simulate",
            "--out",
            p(&data),
            "--frames",
            "4",
            "--seed",
            "3"
        ])
        .0,
        0
    );
    let pre = dir.path().join("pre.ckpt");
    let (code, stdout) = rfpose(&[
        "pretrain",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&pre),
    ]);
    assert_eq!(code, 0);
    let v = json(&stdout);
    assert_eq!(v["masked_counts"], serde_json::json!([213]));
    assert_eq!(v["max_target_grad_norm"], 0.0);
    assert_eq!(
        rfpose(&["eval", "--data", p(&data), "--ckpt", p(&pre)]).0,
        1,
        "no pose estimator"
    );

    let tuned = dir.path().join("tuned.ckpt");
    assert_eq!(
        rfpose(&[
            "finetune",
            "--data",
            p(&data),
            "--init",
            p(&pre),
            "--config",
            p(&cfg),
            "--out",
            p(&tuned)
        ])
        .0,
        0
    );
    assert_eq!(
        rfpose(&[
            "eval",
            "--data",
            p(&data),
            "--ckpt",
            p(&tuned),
            "--subgroups",
            "2"
        ])
        .0,
        0
    );
}
