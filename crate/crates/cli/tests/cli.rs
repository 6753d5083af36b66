use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qkdsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdsim"))
        .args(args)
        .output()
        .expect("qkdsim runs")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_ok_and_failure_exit_code() {
    let ok = qkdsim(&["validate", &scenario("s5.toml")]);
    assert!(ok.status.success());
    assert!(stdout(&ok).starts_with("ok s5"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let base = fs::read_to_string(scenario("base39.toml")).unwrap();
    fs::write(&bad, base.replace("policy = \"s3\"", "policy = \"s5\"")).unwrap();
    let out = qkdsim(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid scenario"));
}

#[test]
fn simulate_then_replay_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let sim = qkdsim(&["simulate", &scenario("s2.toml"), "--seed", "4", "--out", out_dir]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&sim)).unwrap();
    let trace = dir.path().join("trace_s2_4.csv");
    let replay = qkdsim(&["replay-metrics", trace.to_str().unwrap()]);
    assert!(replay.status.success());
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&replay)).unwrap();
    for k in ["p_succ", "df_max", "eta_util", "trr", "fairness"] {
        assert_eq!(metrics[k], summary[k], "{k}");
    }
}

#[test]
fn experiment_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("exp");
    let exp = qkdsim(&[
        "experiment",
        &scenario("suite118.toml"),
        "--runs",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(exp.status.success(), "{}", String::from_utf8_lossy(&exp.stderr));
    let report = out_dir.join("report.json");
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["scenarios"].as_array().unwrap().len(), 2);

    let plots = dir.path().join("plots");
    let pd = qkdsim(&["plot-data", report.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(pd.status.success());
    for f in ["trr_hist.csv", "fairness.csv", "iterations_fairness.csv", "sigma_heatmap.csv", "metrics.csv"] {
        let text = fs::read_to_string(plots.join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f} is empty");
    }
}

#[test]
fn frame_encode_decode_golden() {
    let key = "000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f";
    let asdu = "32060201010300cdcc474200";
    let frame = "0102000000000000002a000c32070002050606cac44e480b8018c08b912e7ccdc3dc9eb70bf09d33";
    let enc = qkdsim(&["frame", "encode", "--mode", "otp", "--key", key, "--index", "42", asdu]);
    assert!(enc.status.success());
    assert_eq!(stdout(&enc).trim(), frame);
    let dec = qkdsim(&["frame", "decode", "--key", key, "--index", "42", frame]);
    assert_eq!(stdout(&dec).trim(), asdu);

    let mut tampered = frame.to_string();
    tampered.replace_range(30..31, "f");
    let bad = qkdsim(&["frame", "decode", "--key", key, "--index", "42", &tampered]);
    assert_eq!(bad.status.code(), Some(2));
}
