//! End-to-end command-line pipeline checks: train → forecast → eval,
//! reproducibility from the resolved config, and exit codes.

use std::path::Path;
use std::process::Command;

fn hatfc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hatfc"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

fn make_dataset(dir: &Path) -> std::path::PathBuf {
    let csv = dir.join("series.csv");
    let out = hatfc()
        .args([
            "synth",
            "--kind",
            "multiscale",
            "--n",
            "700",
            "--variates",
            "2",
            "--noise",
            "0.05",
            "--seed",
            "11",
            "--file",
        ])
        .arg(&csv)
        .output()
        .expect("synth runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    csv
}

fn train_small(csv: &Path, out_dir: &Path, seed: &str) {
    let out = hatfc()
        .args([
            "train",
            "--horizon",
            "8",
            "--segments",
            "2",
            "--lookback",
            "24",
            "--window",
            "8",
            "--hidden",
            "8",
            "--heads",
            "2",
            "--blocks",
            "1",
            "--epochs",
            "2",
            "--batch-size",
            "16",
            "--stride",
            "4",
            "--seed",
            seed,
        ])
        .arg("--data")
        .arg(csv)
        .arg("--out")
        .arg(out_dir)
        .output()
        .expect("train runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_forecast_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = make_dataset(tmp.path());
    let run = tmp.path().join("run");
    train_small(&csv, &run, "5");

    for f in [
        "checkpoint.ckpt",
        "training_report.csv",
        "training_summary.json",
        "resolved_config.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // forecast twice: identical inputs must give identical files
    let fc1 = tmp.path().join("fc1");
    let fc2 = tmp.path().join("fc2");
    for dir in [&fc1, &fc2] {
        let out = hatfc()
            .arg("forecast")
            .arg("--checkpoint")
            .arg(run.join("checkpoint.ckpt"))
            .arg("--input")
            .arg(&csv)
            .arg("--out")
            .arg(dir)
            .output()
            .expect("forecast runs");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = read(&fc1.join("forecast.csv"));
    assert_eq!(a, read(&fc2.join("forecast.csv")));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("step,v0,v1"));
    assert_eq!(text.lines().count(), 9); // header + 8 steps

    // evaluation produces the report trio
    let ev = tmp.path().join("ev");
    let out = hatfc()
        .arg("eval")
        .arg("--checkpoint")
        .arg(run.join("checkpoint.ckpt"))
        .arg("--data")
        .arg(&csv)
        .arg("--out")
        .arg(&ev)
        .args(["--stride", "8", "--epochs", "2"])
        .output()
        .expect("eval runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["forecast_report.csv", "forecast_report.json", "per_step_mse.csv"] {
        assert!(ev.join(f).exists(), "missing {f}");
    }
    let report = std::fs::read_to_string(ev.join("forecast_report.csv")).unwrap();
    for model in ["model", "persistence", "linear", "dlinear", "nlinear"] {
        assert!(report.contains(model), "report lacks {model}:\n{report}");
    }
}

#[test]
fn rerunning_the_resolved_config_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = make_dataset(tmp.path());
    let run1 = tmp.path().join("run1");
    train_small(&csv, &run1, "9");

    // re-run purely from the resolved config (plus out/data overrides)
    let run2 = tmp.path().join("run2");
    let out = hatfc()
        .arg("train")
        .arg("--config")
        .arg(run1.join("resolved_config.json"))
        .arg("--out")
        .arg(&run2)
        .output()
        .expect("train runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        read(&run1.join("training_report.csv")),
        read(&run2.join("training_report.csv")),
        "training trace differs when re-run from the resolved config"
    );
    assert_eq!(
        read(&run1.join("checkpoint.ckpt")),
        read(&run2.join("checkpoint.ckpt")),
        "checkpoint differs when re-run from the resolved config"
    );
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    // missing dataset path
    let out = hatfc()
        .arg("train")
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("--data"), "error should name the flag: {msg}");

    // horizon not divisible by segments
    let csv = make_dataset(tmp.path());
    let out = hatfc()
        .arg("train")
        .args(["--horizon", "7", "--segments", "2"])
        .arg("--data")
        .arg(&csv)
        .arg("--out")
        .arg(tmp.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // bad bench grid
    let out = hatfc()
        .arg("bench")
        .args(["--grid", "12,forty"])
        .arg("--out")
        .arg(tmp.path().join("z"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn forecast_input_validation_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = make_dataset(tmp.path());
    let run = tmp.path().join("run");
    train_small(&csv, &run, "3");

    // too-short input
    let short = tmp.path().join("short.csv");
    let mut body = String::from("date,v0,v1\n");
    for r in 0..10 {
        body.push_str(&format!("{r},0.1,0.2\n"));
    }
    std::fs::write(&short, body).unwrap();
    let out = hatfc()
        .arg("forecast")
        .arg("--checkpoint")
        .arg(run.join("checkpoint.ckpt"))
        .arg("--input")
        .arg(&short)
        .arg("--out")
        .arg(tmp.path().join("fc"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("24"), "error should name the required length: {msg}");

    // wrong variate count
    let narrow = tmp.path().join("narrow.csv");
    let mut body = String::from("date,v0\n");
    for r in 0..40 {
        body.push_str(&format!("{r},0.1\n"));
    }
    std::fs::write(&narrow, body).unwrap();
    let out = hatfc()
        .arg("forecast")
        .arg("--checkpoint")
        .arg(run.join("checkpoint.ckpt"))
        .arg("--input")
        .arg(&narrow)
        .arg("--out")
        .arg(tmp.path().join("fc2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epoch_training_writes_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = make_dataset(tmp.path());
    let run = tmp.path().join("run0");
    let out = hatfc()
        .args([
            "train", "--horizon", "8", "--segments", "2", "--lookback", "24",
            "--window", "8", "--hidden", "8", "--heads", "2", "--blocks", "1",
            "--epochs", "0", "--seed", "1",
        ])
        .arg("--data")
        .arg(&csv)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.ckpt").exists());
    let report = std::fs::read_to_string(run.join("training_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1); // header only
}

#[test]
fn bench_command_writes_reports_with_slopes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("bench");
    let out = hatfc()
        .arg("bench")
        .args(["--grid", "64,128", "--window", "16", "--dim", "16", "--repeats", "5"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("scaling_report.json")).unwrap(),
    )
    .unwrap();
    assert!(json["windowed_slope"].is_number());
    assert!(json["full_slope"].is_number());
    let csv = std::fs::read_to_string(out_dir.join("scaling_report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("l,")).count(), 4);
}
