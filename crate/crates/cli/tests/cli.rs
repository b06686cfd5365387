// `args!` builds a Vec so call sites can extend it.
#![allow(clippy::useless_vec)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

macro_rules! args {
    ($($a:expr),* $(,)?) => { vec![$($a.to_string()),*] };
}

fn kat(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kat")).args(args).output().expect("spawn kat")
}

fn ok(args: &[String]) -> Output {
    let out = kat(args);
    assert!(
        out.status.success(),
        "kat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn f(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_owned()
}

fn small_sim(dir: &Path) {
    let cfg = dir.join("sim.json");
    fs::write(&cfg, r#"{"train_len": 40, "test_len": 12}"#).unwrap();
    ok(&args!["simulate", "--case", "user-model", "--seed", "3", "--out", p(dir), "--config", p(&cfg)]);
}

const NET: &str = r#"{"input_dim": 24, "layers": [
  {"type": "dense", "in": 24, "out": 8, "activation": "relu"},
  {"type": "dense", "in": 8, "out": 24, "activation": "identity"}]}"#;

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d);
    for f in ["train.csv", "train.json", "test.csv", "reference.csv", "simulator.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    fs::write(d.join("models.json"), r#"[{"kind": "affine"}, {"kind": "kernel_ridge", "gamma": 0.05}]"#).unwrap();
    ok(&args![
        "calibrate", "--models", f(d, "models.json"), "--data", f(d, "train.csv"),
        "--out", f(d, "calibrated.json"),
    ]);
    let cal: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("calibrated.json")).unwrap()).unwrap();
    assert_eq!(cal.as_array().unwrap().len(), 2);

    ok(&args![
        "augment", "--calibrated", f(d, "calibrated.json"), "--data", f(d, "train.csv"),
        "--count", "80", "--alpha", "0", "--beta", "100", "--seed", "1", "--out", f(d, "synth.csv"),
    ]);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("synth.json")).unwrap()).unwrap();
    assert_eq!(meta["n_synthetic"], 80);

    fs::write(d.join("net.json"), NET).unwrap();
    ok(&args![
        "train", "--net", f(d, "net.json"), "--data", f(d, "train.csv"),
        "--synthetic", f(d, "synth.csv"), "--eta-min", "0.5", "--eta-max", "0.95", "--T", "20",
        "--iters", "60", "--batch", "8", "--step", "0.001", "--loss", "mse", "--seed", "2", "--normalize",
        "--grad-noise-every", "10", "--out", f(d, "params.katp"), "--trace", f(d, "trace.csv"),
    ]);
    assert!(d.join("params.katp.norm.json").exists());
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 61);

    let model = args![
        "--net", f(d, "net.json"), "--params", f(d, "params.katp"),
        "--norm", f(d, "params.katp.norm.json"),
    ];
    let mut args = args!["evaluate", "--data", f(d, "test.csv"), "--train", f(d, "train.csv")];
    args.extend(model.iter().cloned());
    let eval: serde_json::Value = serde_json::from_slice(&ok(&args).stdout).unwrap();
    assert!(eval["rmse"].as_f64().unwrap() > 0.0);
    assert!(eval["overfit_gap"].is_number());

    for (kind, extra) in [
        ("overfit", args!["--train", f(d, "train.csv"), "--data", f(d, "test.csv")]),
        ("grad-noise", args!["--data", f(d, "train.csv"), "--synthetic", f(d, "synth.csv")]),
        ("manifold", args!["--synthetic", f(d, "synth.csv"), "--simulator", f(d, "simulator.json")]),
    ] {
        let mut args = args!["diagnose", "--kind", kind];
        args.extend(model.iter().cloned());
        args.extend(extra);
        let v: serde_json::Value = serde_json::from_slice(&ok(&args).stdout).unwrap();
        assert!(v.is_object(), "{kind}");
    }

    let mut args = args![
        "diagnose", "--kind", "landscape", "--data", f(d, "train.csv"),
        "--reference", f(d, "reference.csv"), "--resolution", "5",
    ];
    args.extend(model.iter().cloned());
    let csv = String::from_utf8(ok(&args).stdout).unwrap();
    assert_eq!(csv.lines().count(), 26);
    assert!(csv.starts_with("row,col,x,y,empirical,ideal,abs_diff"));
}

#[test]
fn quantile_evaluation_with_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d);
    fs::write(d.join("net.json"), NET).unwrap();
    let mut params = Vec::new();
    for q in ["0.25", "0.5", "0.75"] {
        let out = d.join(format!("q{q}.katp"));
        ok(&args![
            "train", "--net", f(d, "net.json"), "--data", f(d, "train.csv"), "--iters", "30",
            "--loss", &format!("pinball:{q}"), "--out", p(&out),
        ]);
        params.push(out);
    }
    fs::write(d.join("base.json"), r#"{"crps": 2.0}"#).unwrap();
    let mut args = args![
        "evaluate", "--net", f(d, "net.json"), "--data", f(d, "test.csv"),
        "--baseline", f(d, "base.json"), "--params",
    ];
    args.extend(params.iter().map(|x| p(x)));
    let v: serde_json::Value = serde_json::from_slice(&ok(&args).stdout).unwrap();
    let crps = v["crps"].as_f64().unwrap();
    let crpss = v["crpss"].as_f64().unwrap();
    assert!((crpss - 100.0 * (1.0 - crps / 2.0)).abs() < 1e-9);
    assert_eq!(v["pinball"].as_array().unwrap().len(), 3);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let missing = kat(&args!["experiment", "--config", f(d, "nope.json"), "--out", p(d)]);
    assert_eq!(missing.status.code(), Some(2));

    small_sim(d);
    // 24 periods exceed the exact solver's limit
    fs::write(d.join("m.json"), r#"[{"kind": "dispatch_load", "curvature": 1.0, "energy": 120.0, "upper": 10.0, "lower": 1.0}]"#)
        .unwrap();
    let kkt = kat(&args!["calibrate", "--models", f(d, "m.json"), "--data", f(d, "train.csv"), "--method", "kkt-bnb"]);
    assert_eq!(kkt.status.code(), Some(2));

    fs::write(d.join("plain.csv"), "a,b\n1,2\n").unwrap();
    let no_targets = kat(&args!["calibrate", "--models", f(d, "m.json"), "--data", f(d, "plain.csv")]);
    assert_eq!(no_targets.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d);
    fs::write(d.join("net.json"), NET).unwrap();
    let out = kat(&args![
        "train", "--net", f(d, "net.json"), "--data", f(d, "train.csv"), "--iters", "20",
        "--step", "1e200", "--out", f(d, "x.katp"),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn experiment_bundle_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = d.join("exp.json");
    fs::write(
        &cfg,
        r#"{"scenarios": ["KAT-LM[UM]", "O-LM[UM]"], "seeds": [0, 1],
            "simulator": {"train_len": 40, "test_len": 12},
            "augmentation": {"kat": 60}}"#,
    )
    .unwrap();
    let (a, b) = (d.join("a"), d.join("b"));
    ok(&args!["experiment", "--config", p(&cfg), "--out", p(&a), "--iters", "40", "--threads", "1"]);
    ok(&args!["experiment", "--config", p(&cfg), "--out", p(&b), "--iters", "40", "--threads", "2"]);
    let ra = fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.json")).unwrap());
    assert!(a.join("cells.csv").exists() && a.join("summary.csv").exists());
    assert!(a.join("traces").read_dir().unwrap().count() >= 4);
}
