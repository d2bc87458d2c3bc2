use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--users", "5", "--n_per_user", "40", "--background_size", "200", "--hidden", "8", "--rounds", "4", "--epoch_ranges", "2",
    "--reid_methods", "[chance,knn]",
];

fn fedleak(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedleak"))
        .args(args)
        .args(SMALL)
        .args(["--output_dir", out.to_str().unwrap()])
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn federate_then_attack_the_stored_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&fedleak(&["federate"], dir.path()));
    let log = dir.path().join("log");
    assert_eq!(out.trim(), log.display().to_string());
    assert!(log.join("manifest.json").is_file() && log.join("deltas.bin").is_file());

    let out = stdout(&fedleak(&["attack", "--log", log.to_str().unwrap()], dir.path()));
    assert!(out.trim().ends_with("reid_closed_reid.csv"));
    let text = std::fs::read_to_string(dir.path().join("reid_closed_reid.csv")).unwrap();
    assert!(text.starts_with("seed,config_hash,method,metric,value\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 5);
}

#[test]
fn gen_world_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&fedleak(&["gen-world"], dir.path()));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("world.json")).unwrap()).unwrap();
    assert_eq!(v["users"].as_array().unwrap().len(), 5);
}

#[test]
fn report_honours_config_file_and_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.yaml");
    std::fs::write(&cfg, "format: json\nseed: 7\n").unwrap();
    let args = ["report", "--family", "bias-profile", "--config", cfg.to_str().unwrap()];
    stdout(&fedleak(&args, dir.path()));
    let first = std::fs::read(dir.path().join("bias_profile.json")).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["seed"], 7);
    assert!(v.get("created").is_none());
    stdout(&fedleak(&args, dir.path()));
    assert_eq!(std::fs::read(dir.path().join("bias_profile.json")).unwrap(), first);
}

fn bare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedleak")).args(args).output().unwrap()
}

#[test]
fn bad_input_fails_with_the_key_named() {
    let o = bare(&["report", "--family", "reid_closed", "--rounds", "lots"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`rounds`"), "{err}");

    assert!(!bare(&["report", "--family", "nope"]).status.success());

    let o = bare(&["attack", "--nonsense", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonsense"));
}
