use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selfdebias"))
}

/// Shrinks a default config so the whole pipeline runs in well under a second.
fn tiny_config(dir: &Path) {
    let path = dir.join("config.json");
    let out = bin().args(["init", "--out"]).arg(dir).output().unwrap();
    assert!(out.status.success());
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["n_corpus"] = 120.into();
    v["n_eval"] = 40.into();
    v["capture_timesteps"] = serde_json::json!([10, 20]);
    v["generator"]["embed_dim"] = 24.into();
    v["projector"]["epochs"] = 3.into();
    v["projector"]["batch_size"] = 32.into();
    v["projector"]["hidden"] = 16.into();
    v["guidance"]["batch_size"] = 20.into();
    v["guidance"]["guided_timesteps"] = (10..=20).collect::<Vec<u32>>().into();
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn init_writes_full_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["init", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["n_corpus"], 2000);
    assert_eq!(v["projector"]["epochs"], 30);
    assert!(v["guidance"]["gamma"].is_number());
}

#[test]
fn stage_without_upstream_exits_with_dependency_code() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let out = bin().args(["debias", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("discover"));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"n_eval": 0}"#).unwrap();
    let out = bin().args(["generate", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_sweep_parameter_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let out = bin()
        .args(["sweep", "--param", "temperature", "--values", "1,2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("report").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("0 run artifacts"));
}

#[test]
fn staged_run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    for stage in ["generate", "train", "discover", "debias", "evaluate"] {
        let out = bin().arg(stage).arg("--out").arg(dir.path()).output().unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = bin().arg("report").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let summary = String::from_utf8_lossy(&out.stdout);
    assert!(summary.contains("FD before"), "{summary}");
    for f in ["report.json", "histograms.csv", "kl_trace.csv", "metrics.csv", "summary.txt", "timings.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_config(a.path());
    tiny_config(b.path());
    for (dir, seed) in [(a.path(), "1"), (b.path(), "2")] {
        let out = bin().args(["generate", "--seed", seed, "--out"]).arg(dir).output().unwrap();
        assert!(out.status.success());
    }
    assert_ne!(
        std::fs::read(a.path().join("reference.jsonl")).unwrap(),
        std::fs::read(b.path().join("reference.jsonl")).unwrap()
    );
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let out = bin()
        .args(["sweep", "--param", "inner_steps", "--values", "1,2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep_inner_steps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
