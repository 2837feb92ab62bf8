use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/config.toml")
}

fn radsum(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radsum"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn fisher_before_pretrain_reports_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config();
    let o = radsum(&["fisher", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("missing checkpoint"), "{stderr}");
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("fisher/error.json")).unwrap()).unwrap();
    assert_eq!(record["status"], "error");
    assert_eq!(record["stage"], "fisher");
}

#[test]
fn unknown_subcommand_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = radsum(&["summarize-everything"], tmp.path());
    assert!(!o.status.success());
}

#[test]
fn schema_violation_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[pretrain]\nepochs = \"ten\"\n").unwrap();
    let o = radsum(&["prepare", "--config", cfg.to_str().unwrap()], &tmp.path().join("runs"));
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("config schema violation") && stderr.contains("epochs"), "{stderr}");
}

#[test]
fn prepare_and_stats_write_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config();
    let cfg = cfg.to_str().unwrap();
    for stage in ["prepare", "stats"] {
        let o = radsum(&[stage, "--config", cfg, "--limit-n", "40"], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("stats/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["limit_n"], 40);
    assert!(manifest["inputs"].as_object().unwrap().contains_key("prepare/reports.jsonl"));
    let csv = std::fs::read_to_string(tmp.path().join("stats/stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
}

#[test]
fn seed_flag_changes_the_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config();
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(radsum(&["prepare", "--config", cfg, "--seed", "1"], &a).status.success());
    assert!(radsum(&["prepare", "--config", cfg, "--seed", "2"], &b).status.success());
    let read = |p: &Path| std::fs::read(p.join("prepare/split.json")).unwrap();
    assert_ne!(read(&a), read(&b));
}
