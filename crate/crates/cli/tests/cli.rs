use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dmsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmsp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dmsp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small SCR instance in `dir/data`.
fn small_scr(dir: &Path, seed: &str, sigma: &str) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "gen-scr", "--seed", seed, "--out-dir", s(&out), "--n-high", "60", "--n-low", "200",
        "--noise-sigma", sigma,
    ]);
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let csv = data.join("dataset.csv");
    let mut args = vec!["train", "--data", s(&csv), "--out-dir", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn scores(ckpt: &Path) -> Vec<f64> {
    let v: Value = serde_json::from_str(&ok(&["inspect-fidelity", "--checkpoint", s(ckpt)])).unwrap();
    v.as_array().unwrap().iter().map(|e| e["score"].as_f64().unwrap()).collect()
}

#[test]
fn gen_scr_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_scr(&dir.path().join("a"), "9", "0.5");
    let b = small_scr(&dir.path().join("b"), "9", "0.5");
    let c = small_scr(&dir.path().join("c"), "10", "0.5");
    for f in ["dataset.csv", "truth.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_ne!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(c.join("dataset.csv")).unwrap());
}

fn records(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn gen_scr_defaults_and_noise_level() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, noisy) = (dir.path().join("clean"), dir.path().join("noisy"));
    let stdout = ok(&["gen-scr", "--seed", "3", "--out-dir", s(&clean), "--noise-sigma", "0"]);
    assert!(stdout.contains("n = 200") && stdout.contains("n = 2000"));
    ok(&["gen-scr", "--seed", "3", "--out-dir", s(&noisy)]);
    assert_eq!(records(&clean.join("truth.csv")).len(), 64 * 64);
    assert_eq!(fs::read(clean.join("truth.csv")).unwrap(), fs::read(noisy.join("truth.csv")).unwrap());

    // The noise level only moves low-quality targets; their mean absolute
    // shift is sigma * sqrt(2 / pi) for the default sigma of 0.5.
    let (a, b) = (records(&clean.join("dataset.csv")), records(&noisy.join("dataset.csv")));
    assert_eq!((a.len(), b.len()), (2200, 2200));
    let mut shifts = Vec::new();
    for (ra, rb) in a.iter().zip(&b) {
        for col in [0, 1, 2, 3, 5, 6] {
            assert_eq!(ra[col], rb[col]);
        }
        let (ta, tb): (f64, f64) = (ra[4].parse().unwrap(), rb[4].parse().unwrap());
        if &ra[0] == "0" {
            assert_eq!(ta, tb);
        } else {
            shifts.push((ta - tb).abs());
        }
    }
    let mean = shifts.iter().sum::<f64>() / shifts.len() as f64;
    let expected = 0.5 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mean - expected).abs() < 0.05, "{mean} vs {expected}");
}

#[test]
fn train_predict_eval_inspect_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scr(dir.path(), "4", "0.5");
    let model = dir.path().join("m");
    train(&data, &model, &["--seed", "4", "--max-epochs", "2"]);
    let ckpt = model.join("model.ckpt");
    let report: Value = serde_json::from_str(&fs::read_to_string(model.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["split_seed"], 4);

    let sc = scores(&ckpt);
    assert_eq!(sc.len(), 2);
    assert!((sc.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let locs = dir.path().join("locs.csv");
    let mut body = String::from("x,y\n");
    for i in 0..25 {
        body += &format!("{},{}\n", (i % 5) as f64 * 12.0 + 2.0, (i / 5) as f64 * 12.0 + 1.0);
    }
    fs::write(&locs, body).unwrap();
    let pred = dir.path().join("pred.csv");
    ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data.join("dataset.csv")), "--locations", s(&locs), "--out", s(&pred)]);
    let mut rdr = csv::Reader::from_path(&pred).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["x", "y", "timestamp", "pred_0", "pred_1", "fused", "partial"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 25);
    for r in &rows {
        let p0: f64 = r[3].parse().unwrap();
        let p1: f64 = r[4].parse().unwrap();
        let fused: f64 = r[5].parse().unwrap();
        assert!((sc[0] * p0 + sc[1] * p1 - fused).abs() < 1e-9);
        assert_eq!(&r[6], "false");
    }

    let masked = dir.path().join("masked.csv");
    fs::write(&masked, "source_id,index\n0,0\n1,7\n").unwrap();
    let mpred = dir.path().join("mpred.csv");
    ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data.join("dataset.csv")), "--masked-samples", s(&masked), "--out", s(&mpred)]);
    let text = fs::read_to_string(&mpred).unwrap();
    assert!(text.starts_with("source_id,index,x,y,timestamp,pred_0,pred_1,fused,partial\n"));
    assert_eq!(text.lines().count(), 3);

    let residuals = dir.path().join("res.csv");
    let eval_out = dir.path().join("eval.json");
    let stdout = ok(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&data.join("dataset.csv")), "--truth",
        s(&data.join("truth.csv")), "--residuals", s(&residuals), "--out", s(&eval_out),
    ]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["cod", "evs", "mae", "n", "pearson", "rmse", "undefined"]);
    assert_eq!(v, serde_json::from_str::<Value>(&fs::read_to_string(&eval_out).unwrap()).unwrap());
    let n = v["n"].as_u64().unwrap() as usize;
    assert_eq!(fs::read_to_string(&residuals).unwrap().lines().count(), n + 1);

    let plots = dir.path().join("plots");
    ok(&["plot", "--checkpoint", s(&ckpt), "--data", s(&data.join("dataset.csv")), "--reference-source", "0", "--out-dir", s(&plots)]);
    for f in ["fidelity.svg", "predictions.svg", "scatter.svg"] {
        let doc = fs::read_to_string(plots.join(f)).unwrap();
        assert!(doc.starts_with("<?xml") && doc.contains("<svg") && doc.trim_end().ends_with("</svg>"), "{f}");
    }
}

#[test]
fn frozen_mode_keeps_uniform_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scr(dir.path(), "5", "0.5");
    let model = dir.path().join("frozen");
    train(&data, &model, &["--seed", "5", "--max-epochs", "3", "--mode", "frozen-fidelity"]);
    assert_eq!(scores(&model.join("model.ckpt")), vec![0.5, 0.5]);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scr(dir.path(), "6", "0.5");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train(&data, &a, &["--seed", "6", "--max-epochs", "4"]);
    train(&data, &b, &["--seed", "6", "--max-epochs", "4"]);
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());

    // Two epochs, then resume to four: same weights as the straight run.
    train(&data, &c, &["--seed", "6", "--max-epochs", "2"]);
    let ckpt = c.join("model.ckpt");
    train(&data, &c, &["--resume", s(&ckpt), "--max-epochs", "4"]);
    let straight = fs::read(a.join("model.ckpt")).unwrap();
    let resumed = fs::read(&ckpt).unwrap();
    assert_eq!(straight, resumed);
}

#[test]
fn symmetric_sources_get_similar_scores() {
    // Zero noise and equal counts: both sources are exact observations.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-scr", "--seed", "7", "--out-dir", s(&data), "--n-high", "300", "--n-low", "300",
        "--noise-sigma", "0",
    ]);
    let model = dir.path().join("m");
    train(&data, &model, &["--seed", "7", "--max-epochs", "30"]);
    let sc = scores(&model.join("model.ckpt"));
    assert!((sc[0] - sc[1]).abs() < 0.15, "{sc:?}");
}

#[test]
fn exit_codes_and_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");

    let out = dmsp(&["train", "--data", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "seed is required");

    let out = dmsp(&["--json-errors", "train", "--data", s(&missing), "--out-dir", s(dir.path()), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(v["error"], "data");
    assert_eq!(v["exit_code"], 3);

    let out = dmsp(&["--json-errors", "frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(v["error"], "usage");

    let out = dmsp(&["train", "--data", "x", "--out-dir", "y", "--seed", "1", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "source_id,timestamp,x,y,target,f0\n0,0,1,1,nan,1\n").unwrap();
    let out = dmsp(&["train", "--data", s(&bad), "--out-dir", s(dir.path()), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(3));

    assert_eq!(dmsp(&["--help"]).status.code(), Some(0));
}
