mod common;

use std::process::Command;

use common::tiny_forecast;

fn tta() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tta"))
}

#[test]
fn evaluate_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_forecast("cli", r#"["no_tta", "bn_stats"]"#, true);
    let path = tmp.path().join("cli.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let run = tmp.path().join("runs/cli");
    let out = tta()
        .args(["evaluate", "-c"])
        .arg(&path)
        .arg("-o")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("metrics.json").exists());
    assert!(run.join("rolling_bn_stats.csv").exists());

    let rep = tmp.path().join("report");
    let out = tta()
        .args(["report", "--runs"])
        .arg(&run)
        .arg("--out")
        .arg(&rep)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t1 = std::fs::read_to_string(rep.join("table1.csv")).unwrap();
    assert_eq!(t1.lines().count(), 3);
}

#[test]
fn bad_config_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "schema_version = 2\nname = \"x\"\n").unwrap();
    let out = tta().args(["evaluate", "-c"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
