use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sco-adversary"));
    c.env_remove("SCO_ADVERSARY_OUT");
    c
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_codebook_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cb.json");
    ok(bin()
        .args([
            "gen-codebook",
            "-N",
            "8",
            "--dprime",
            "256",
            "--seed",
            "1",
            "-o",
        ])
        .arg(&path)
        .output()
        .unwrap());
    assert!(json(&path).is_object());
}

#[test]
fn run_then_verify_and_risk() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(bin()
        .args([
            "run", "--family", "gd", "-n", "4", "-T", "12", "-N", "8", "--dprime", "256",
        ])
        .args(["--seeds", "3", "--mc-samples", "500"])
        .env("SCO_ADVERSARY_OUT", dir.path())
        .output()
        .unwrap());
    assert!(stdout.contains("verify PASS"), "{stdout}");
    let run = dir.path().join("gd-seed3");
    for f in [
        "config.toml",
        "codebook.json",
        "dataset.json",
        "trajectory.bin",
        "trajectory.json",
        "risk.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(json(&dir.path().join("summary.json"))["pass"], true);

    let verify = ok(bin()
        .args(["verify", "--run-dir"])
        .arg(&run)
        .output()
        .unwrap());
    assert!(verify.trim_end().ends_with("PASS"), "{verify}");

    let risk = ok(bin()
        .args(["risk", "--mc-samples", "200", "--run-dir"])
        .arg(&run)
        .output()
        .unwrap());
    assert_eq!(risk.lines().count(), 2, "{risk}");
    let csv = std::fs::read_to_string(run.join("risk.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn toml_config_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "family = \"smallstep\"\neta = 0.02\nT = 50\nmc_samples = 100\n",
    )
    .unwrap();
    ok(bin()
        .args(["run", "-T", "40", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap());
    let stored = std::fs::read_to_string(dir.path().join("smallstep-seed0/config.toml")).unwrap();
    assert!(stored.contains("T = 40"), "{stored}");
}

#[test]
fn tampered_trajectory_fails_verify() {
    let dir = tempfile::tempdir().unwrap();
    ok(bin()
        .args([
            "run",
            "--family",
            "smallstep",
            "--eta",
            "0.02",
            "-T",
            "30",
            "--mc-samples",
            "100",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap());
    let run = dir.path().join("smallstep-seed0");
    let bin_path = run.join("trajectory.bin");
    let mut bytes = std::fs::read(&bin_path).unwrap();
    let last = bytes.len() - 8;
    bytes[last..].copy_from_slice(&1.0f64.to_le_bytes());
    std::fs::write(&bin_path, bytes).unwrap();
    let out = bin()
        .args(["verify", "--run-dir"])
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_input_exits_with_error() {
    let out = bin()
        .args(["run", "--family", "gd", "-n", "0"])
        .arg("--out")
        .arg("/nonexistent-unused")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["acceptance", "no-such-suite"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn acceptance_suite_prints_a_line() {
    let stdout = ok(bin()
        .args(["acceptance", "smallstep-exact"])
        .output()
        .unwrap());
    assert!(
        stdout.starts_with("criterion 1 smallstep-exact: PASS"),
        "{stdout}"
    );
}
