use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn iir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iir")).args(args).output().expect("binary runs")
}

fn iir_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iir"))
        .args(args)
        .env(key, val)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn without_timing(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timing");
    v
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(iir(&[]).status.code(), Some(2));
    assert_eq!(iir(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(iir(&["fit", "--preset", "trig-d5", "--n", "x"]).status.code(), Some(2));
    assert_eq!(iir(&["--help"]).status.code(), Some(0));
    assert_eq!(iir(&["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = iir(&["fit", "--csv", path_str(&missing)]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "1,2,3\n4,oops,6\n").unwrap();
    let out = iir(&["fit", "--csv", path_str(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");

    let out = iir(&["fit", "--preset", "trig-d5", "--gamma", "100", "--n", "30"]);
    assert_eq!(out.status.code(), Some(1));
    let out = iir(&["fit", "--preset", "trig-d5", "--rule", "sometimes"]);
    assert_eq!(out.status.code(), Some(1));
    let out = iir(&["fit"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_then_fit_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("trig.csv");
    let out = iir(&["synth", "--preset", "trig-d5", "--n", "200", "--out", path_str(&data)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 201);
    assert_eq!(text.lines().next().unwrap(), "x1,x2,x3,x4,x5,y");

    let v = json(&iir(&["fit", "--csv", path_str(&data), "--header", "--rule", "fixed:25"]));
    let m = &v["metrics"];
    assert_eq!(m["epochs"], 25);
    assert_eq!(m["n_train"], 160);
    assert_eq!(m["n_test"], 40);
    assert_eq!(m["coefficients"].as_array().unwrap().len(), 5);
    assert_eq!(m["model"], "primal");
    assert!(m["holdout_curve"].is_null());
    assert_eq!(v["seed"], 0);
    assert_eq!(v["command"], "fit");
}

#[test]
fn holdout_fit_reports_curve_and_is_reproducible() {
    let args = ["fit", "--preset", "trig-d5", "--n", "80", "--test-size", "200", "--rule", "holdout:0.25,60"];
    let a = json(&iir(&args));
    let b = json(&iir(&args));
    assert_eq!(without_timing(a.clone()), without_timing(b));
    let curve = a["metrics"]["holdout_curve"].as_array().unwrap();
    assert_eq!(curve.len(), 60);
    let t = a["metrics"]["epochs"].as_u64().unwrap() as usize;
    let best = curve
        .iter()
        .map(|p| p[1].as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(curve[t - 1][1].as_f64().unwrap(), best);

    let other = json(&iir(&["--seed", "1", "fit", "--preset", "trig-d5", "--n", "80", "--test-size", "200"]));
    assert_ne!(a["metrics"]["coefficients"], other["metrics"]["coefficients"]);
}

#[test]
fn kernel_fit_has_dual_coefficients() {
    let v = json(&iir(&[
        "fit", "--preset", "trig-d5", "--n", "50", "--test-size", "100", "--kernel", "gaussian:1.5",
        "--rule", "fixed:10",
    ]));
    let m = &v["metrics"];
    assert_eq!(m["model"], "dual");
    assert_eq!(m["coefficients"].as_array().unwrap().len(), 50);
    assert_eq!(m["kernel"]["kind"], "gaussian");
}

#[test]
fn curve_has_one_row_per_epoch() {
    let out = iir(&["curve", "--preset", "trig-d5", "--n", "60", "--test-size", "100", "--epochs", "100"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train,validation,test");
    assert_eq!(lines.len(), 101);
    for (k, line) in lines[1..].iter().enumerate() {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[0] as usize, k + 1);
        assert!(cols[1..].iter().all(|e| e.is_finite() && *e >= 0.0));
    }
}

#[test]
fn bench_on_libsvm_classification() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("two.svm");
    let mut text = String::new();
    for i in 0..120 {
        let x = (i as f64 * 0.7).sin();
        let z = (i as f64 * 1.3).cos();
        let label = if x + 0.5 * z > 0.0 { "+1" } else { "-1" };
        text.push_str(&format!("{label} 1:{x} 2:{z}\n"));
    }
    std::fs::write(&file, text).unwrap();
    let out = iir(&[
        "bench", "--libsvm", path_str(&file), "--task", "classification", "--seeds", "2", "--epochs", "50",
        "--format", "csv",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,metric,median_error");
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], "misclassification");
        let e: f64 = cols[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&e));
    }
}

#[test]
fn verify_passes_and_honours_out() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("report.json");
    let out = iir(&[
        "verify", "--epochs", "100", "--instances", "10", "--trials", "100", "--out", path_str(&target),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&target).unwrap()).unwrap();
    assert_eq!(v["metrics"]["passed"], true);
    assert_eq!(v["config"]["command"]["epochs"], 100);
    assert!(v["config"]["global"].get("out").is_none());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn thread_count_does_not_change_results() {
    let args = ["rates", "--grid", "64,256,1024,4096", "--replicates", "8", "--mode", "risk", "--preset", "source:r=1"];
    let one = json(&iir_env(&args, "IIR_THREADS", "1"));
    let four = json(&iir_env(&args, "IIR_THREADS", "4"));
    assert_eq!(without_timing(one.clone()), without_timing(four));
    let slope = one["metrics"]["estimate"]["slope"].as_f64().unwrap();
    assert!(slope < 0.0);
}

#[test]
fn rates_rejects_short_grid_and_trig_presets() {
    assert_eq!(iir(&["rates", "--grid", "64,128,256"]).status.code(), Some(1));
    assert_eq!(iir(&["rates", "--preset", "trig-d5"]).status.code(), Some(1));
}
