use std::process::Command;

fn skbcom(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_skbcom"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn missing_model_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"glyph": {"train_per_class": 4, "test_per_class": 2}}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let gen = skbcom(dir.path(), &["-c", cfg, "gen-data"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(dir.path().join("data").is_dir());
    let run = skbcom(dir.path(), &["-c", cfg, "run", "--snr", "5"]);
    assert!(!run.status.success());
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("encoder.skbm"), "{err}");
}

#[test]
fn show_config_round_trips_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"train_seed": 42, "eval": {"budgets": [0.002, "theta"]}}"#).unwrap();
    let out = skbcom(dir.path(), &["-c", cfg.to_str().unwrap(), "show-config"]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["train_seed"], 42);
    assert_eq!(json["eval"]["budgets"][1], "theta");
    assert_eq!(json["cvae"]["group_widths"], serde_json::json!([8, 8]));
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = skbcom(dir.path(), &["-c", cfg.to_str().unwrap(), "show-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.json"));
}
