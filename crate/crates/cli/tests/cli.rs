use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safety-filter"))
        .args(args)
        .output()
        .unwrap()
}

fn config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/double_integrator.toml")
        .display()
        .to_string()
}

#[test]
fn stages_run_one_by_one_then_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let cfg = config();
    for stage in ["fit-model", "learn-backup", "solve-value", "certify", "rollout"] {
        let out = cli(&[stage, "--config", &cfg, "--out", a.to_str().unwrap()]);
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = cli(&["run-pipeline", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );

    let csv = tmp.path().join("summary.csv");
    let out = cli(&[
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("a") && table.contains("b"));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 3);
}

#[test]
fn out_of_order_stage_fails_with_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&[
        "solve-value",
        "--config",
        &config(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("solve-value"), "{err}");
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    let text = std::fs::read_to_string(config())
        .unwrap()
        .replace("gamma = 0.9", "gamma = 1.0");
    std::fs::write(&path, text).unwrap();
    let out = cli(&["fit-model", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(cli(&["compare"]).status.code() != Some(0));
}
