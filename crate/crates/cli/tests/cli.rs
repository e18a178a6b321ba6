use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gyrocal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gyrocal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gyrocal(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    gyrocal(args).status.code().expect("exit code")
}

fn short_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{"profile": {{"duration": 300.0, "rest_tail": 60.0}},
            "settings": {{"gbrt": {{"n_trees": 5}}, "mlp": {{"epochs": 3}},
                          "features": {{"importance_repeats": 1}}}}{extra}}}"#
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "");
    let (a, b) = (p(tmp.path(), "a"), p(tmp.path(), "b"));
    ok(&["simulate", "--config", &cfg, "--seed", "11", "--out-dir", &a]);
    ok(&["simulate", "--config", &cfg, "--seed", "11", "--out-dir", &b]);
    for name in ["gyro.csv", "ref.csv", "truth.csv", "sim_config.json"] {
        let x = fs::read(tmp.path().join("a").join(name)).unwrap();
        let y = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs");
    }
    let c = p(tmp.path(), "c");
    ok(&["simulate", "--config", &cfg, "--seed", "12", "--out-dir", &c]);
    assert_ne!(
        fs::read(tmp.path().join("a/gyro.csv")).unwrap(),
        fs::read(tmp.path().join("c/gyro.csv")).unwrap()
    );
}

#[test]
fn evaluate_perfect_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "");
    let sim = p(tmp.path(), "sim");
    ok(&["simulate", "--config", &cfg, "--out-dir", &sim]);
    let reference = fs::read_to_string(tmp.path().join("sim/ref.csv")).unwrap();
    let preds = reference.replacen("t,omega", "t,omega_hat", 1);
    fs::write(tmp.path().join("preds.csv"), preds).unwrap();
    let out = p(tmp.path(), "eval");
    ok(&[
        "evaluate",
        "--predictions",
        &p(tmp.path(), "preds.csv"),
        "--reference",
        &p(tmp.path(), "sim/ref.csv"),
        "--truth",
        &p(tmp.path(), "sim/truth.csv"),
        "--out-dir",
        &out,
    ]);
    let report = read_json(tmp.path().join("eval/eval_report.json"));
    assert_eq!(report["mse"].as_f64(), Some(0.0));
    assert_eq!(report["r2"].as_f64(), Some(1.0));
    assert!(report["steady_rows"].as_u64().unwrap() > 0);
}

#[test]
fn train_calibrate_and_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "");
    let sim = p(tmp.path(), "sim");
    ok(&["simulate", "--config", &cfg, "--out-dir", &sim]);
    let (gyro, reference) = (p(tmp.path(), "sim/gyro.csv"), p(tmp.path(), "sim/ref.csv"));
    let train = p(tmp.path(), "train");
    ok(&[
        "train", "--config", &cfg, "--model", "gbrt", "--gyro", &gyro, "--reference", &reference, "--out-dir", &train,
    ]);
    let history = read_json(tmp.path().join("train/history.json"));
    assert_eq!(history["train_loss"].as_array().unwrap().len(), 5);
    assert!(tmp.path().join("train/features.json").exists());

    let cal = p(tmp.path(), "cal");
    ok(&[
        "calibrate",
        "--model-file",
        &p(tmp.path(), "train/model.json"),
        "--gyro",
        &gyro,
        "--out-dir",
        &cal,
    ]);
    let text = fs::read_to_string(tmp.path().join("cal/calibrated.csv")).unwrap();
    assert!(text.starts_with("t,omega_hat\n"));
    assert!(text.lines().count() > 2000);

    let echo = read_json(tmp.path().join("cal/run_config.json"));
    assert_eq!(echo["command"], "calibrate");
    let inputs = echo["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn fit_linear_on_noise_free_staircase() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = p(tmp.path(), "sim");
    ok(&["simulate", "--staircase", "--noise-free", "--out-dir", &sim]);
    let out = p(tmp.path(), "lin");
    ok(&[
        "fit-linear",
        "--gyro",
        &p(tmp.path(), "sim/gyro.csv"),
        "--reference",
        &p(tmp.path(), "sim/ref.csv"),
        "--out-dir",
        &out,
    ]);
    let model = read_json(tmp.path().join("lin/model.json"));
    assert!((model["s_linear"].as_f64().unwrap() - 0.161).abs() < 0.002);
    let table = fs::read_to_string(tmp.path().join("lin/scale_factors.csv")).unwrap();
    assert_eq!(table.lines().count(), 11);
}

#[test]
fn adev_of_a_column() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "");
    let sim = p(tmp.path(), "sim");
    ok(&["simulate", "--config", &cfg, "--out-dir", &sim]);
    let out = p(tmp.path(), "adev");
    ok(&["adev", "--input", &p(tmp.path(), "sim/gyro.csv"), "--column", "sense_in", "--out-dir", &out]);
    let curve = fs::read_to_string(tmp.path().join("adev/adev.csv")).unwrap();
    assert!(curve.starts_with("tau,sigma\n"));
    assert!(read_json(tmp.path().join("adev/noise.json"))["bi"].as_f64().unwrap() > 0.0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path(), "out");
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["train", "--model", "forest"]), 1);
    assert_eq!(code(&["train", "--out-dir", &out]), 1);

    let bad_cfg = tmp.path().join("bad.json");
    fs::write(&bad_cfg, "{\"unknown_field\": 1}").unwrap();
    assert_eq!(code(&["features", "--config", bad_cfg.to_str().unwrap(), "--out-dir", &out]), 1);

    let header = "t,sense_in,sense_quad,sense_freq,sense_freq_err,sense_phase_err,\
                  drive_in,drive_quad,drive_freq,drive_freq_err,drive_phase_err\n";
    fs::write(tmp.path().join("empty.csv"), header).unwrap();
    let mut reference = String::from("t,omega\n");
    let mut zeros = String::from(header);
    for i in 0..100 {
        let t = i as f64 * 0.1;
        reference.push_str(&format!("{t},20\n"));
        zeros.push_str(&format!("{t},0,0,3000000,0,0,1,0,3000380,0,0\n"));
    }
    fs::write(tmp.path().join("ref.csv"), reference).unwrap();
    fs::write(tmp.path().join("zeros.csv"), zeros).unwrap();
    let r = p(tmp.path(), "ref.csv");
    assert_eq!(
        code(&["fit-linear", "--gyro", &p(tmp.path(), "empty.csv"), "--reference", &r, "--out-dir", &out]),
        2
    );
    assert_eq!(
        code(&["fit-linear", "--gyro", &p(tmp.path(), "zeros.csv"), "--reference", &r, "--out-dir", &out]),
        3
    );
}

#[test]
fn help_lists_output_files() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["gyro.csv", "eval_report.json", "comparison.csv", "run_config.json", "Exit codes"] {
        assert!(text.contains(name), "{name} missing from help");
    }
}

#[test]
fn report_writes_every_declared_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), "");
    let sim = p(tmp.path(), "sim");
    ok(&["simulate", "--config", &cfg, "--out-dir", &sim]);
    let out = p(tmp.path(), "report");
    let stdout = ok(&[
        "report",
        "--config",
        &cfg,
        "--gyro",
        &p(tmp.path(), "sim/gyro.csv"),
        "--reference",
        &p(tmp.path(), "sim/ref.csv"),
        "--truth",
        &p(tmp.path(), "sim/truth.csv"),
        "--out-dir",
        &out,
    ])
    .stdout;
    let dir = tmp.path().join("report");
    let table = fs::read_to_string(dir.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    for kind in ["linear", "gbrt", "mlp"] {
        assert!(String::from_utf8_lossy(&stdout).contains(kind));
        assert!(read_json(dir.join(format!("report_{kind}.json")))["r2"].is_number());
        assert!(read_json(dir.join(format!("model_{kind}.json"))).is_object());
        for csv in [format!("calibrated_{kind}.csv"), format!("adev_{kind}.csv")] {
            assert!(fs::read_to_string(dir.join(&csv)).unwrap().lines().count() > 1, "{csv}");
        }
    }
    assert!(dir.join("features.json").exists());
    assert_eq!(read_json(dir.join("run_config.json"))["inputs"].as_array().unwrap().len(), 3);
}
