use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn geofm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geofm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = geofm(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small fixtures, a distilled student and a fine-tuned flood model.
fn prepared() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_path_buf();
    ok(&d, &["--run-dir", "fx", "fixtures", "--pretrain", "8", "--train", "16", "--val", "8", "--test", "16", "--skip-scene"]);
    ok(&d, &["--run-dir", "pd", "pretrain-distill", "--data", "fx/pretrain/manifest.jsonl", "--teacher-dim", "32", "--teacher-steps", "10", "--steps", "10"]);
    ok(
        &d,
        &[
            "--run-dir", "ft", "finetune", "--task", "flood", "--train", "fx/water/train/manifest.jsonl", "--val",
            "fx/water/val/manifest.jsonl", "--encoder", "pd/student.eofm", "--width", "8", "--epochs", "4", "--batch", "8",
        ],
    );
    (tmp, d)
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(geofm(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(geofm(d, &["finetune", "--task", "nope", "--train", "a", "--val", "b"]).status.code(), Some(1));
    assert_eq!(geofm(d, &["eval", "--model", "missing.eofm", "--data", "x"]).status.code(), Some(2));
    std::fs::write(d.join("bad.eofm"), b"not a bundle").unwrap();
    assert_eq!(geofm(d, &["quantize", "--in", "bad.eofm", "--out", "o.eofm"]).status.code(), Some(2));
    assert_eq!(geofm(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_end_to_end() {
    let (_tmp, d) = prepared();
    ok(&d, &["--run-dir", "q", "quantize", "--in", "ft/model.eofm", "--out", "q/model16.eofm"]);
    let n32 = std::fs::metadata(d.join("ft/model.eofm")).unwrap().len();
    let n16 = std::fs::metadata(d.join("q/model16.eofm")).unwrap().len();
    assert!(n16 as f64 <= 0.52 * n32 as f64, "{n16} vs {n32}");

    let eval = ["eval", "--model", "ft/model.eofm", "--fp16", "q/model16.eofm", "--data", "fx/water/test/manifest.jsonl", "--target-data", "fx/water/target/manifest.jsonl"];
    ok(&d, &[&["--run-dir", "e1"][..], &eval].concat());
    ok(&d, &[&["--run-dir", "e2"][..], &eval].concat());
    let m1 = std::fs::read(d.join("e1/metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(d.join("e2/metrics.csv")).unwrap());
    let text = String::from_utf8(m1).unwrap();
    assert!(text.starts_with("task,environment,precision,Acc,FP,F1,mIoU,mF1,OA,IoU_1,F1_1,RMSE\nflood,desk,FP32,"));
    assert!(text.contains("\nflood,desk,FP16,"));
    assert!(d.join("e1/parity.csv").is_file() && d.join("e1/gap.csv").is_file());
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e1/run.json")).unwrap()).unwrap();
    let run2: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e2/run.json")).unwrap()).unwrap();
    assert_eq!(run["config_hash"], run2["config_hash"]);
    assert_eq!(run["inputs"].as_array().unwrap().len(), 4);

    ok(&d, &["--run-dir", "inf", "infer", "--model", "ft/model.eofm", "--data", "fx/water/test/manifest.jsonl"]);
    assert!(d.join("inf/pred/0015.eomask").is_file());
    ok(&d, &["--run-dir", "rep", "report", "--inputs", "e1/metrics.csv,e1/parity.csv"]);
    assert!(std::fs::read_to_string(d.join("rep/report.md")).unwrap().contains("| flood | desk | FP32 |"));
}

#[test]
fn experiment_grid_from_config() {
    let (_tmp, d) = prepared();
    std::fs::write(
        d.join("exp.cfg"),
        "seed = 2\n[experiment]\ntask = flood\nseeds = 1\nepochs = 1\nbatch = 8\nwidth = 8\nfractions = 1.0,0.5,0.25\n",
    )
    .unwrap();
    let args = [
        "--config", "exp.cfg", "--run-dir", "x", "experiment", "--train", "fx/water/train/manifest.jsonl", "--val", "fx/water/val/manifest.jsonl",
        "--test", "fx/water/test/manifest.jsonl", "--encoder", "pd/student.eofm", "--pretrained-head", "ft/model.eofm",
    ];
    ok(&d, &args);
    let grid = std::fs::read_to_string(d.join("x/grid.csv")).unwrap();
    let miou: Vec<&str> = grid.lines().filter(|l| l.contains(",mIoU,")).collect();
    assert_eq!(miou.len(), 9);
    for arm in ["random-random", "geofm-random", "geofm-pretrained"] {
        for f in ["1", "0.5", "0.25"] {
            assert!(miou.iter().any(|l| l.starts_with(&format!("{arm},{f},mIoU,"))));
        }
    }
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("x/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 2);
    assert_eq!(run["config"]["epochs"], "1");
}

#[test]
fn divergence_exits_with_numeric_code() {
    let (_tmp, d) = prepared();
    let out = geofm(
        &d,
        &[
            "--run-dir", "div", "finetune", "--task", "flood", "--train", "fx/water/train/manifest.jsonl", "--val",
            "fx/water/val/manifest.jsonl", "--encoder", "pd/student.eofm", "--width", "8", "--epochs", "2", "--lr", "1e300",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}
