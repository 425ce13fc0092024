use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn asianq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asianq")).args(args).output().expect("binary runs")
}

fn repo_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR")).parent().unwrap().parent().unwrap()
}

#[test]
fn price_smoke_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smoke");
    let o = asianq(&["price", "--preset", "smoke", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["status"], "ok");
    for f in ["config.json", "summary.json", "quotes.csv", "surface.csv", "nodes.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn invalid_grid_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = asianq(&["build", "--n-eta", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failed_stage"], "validate");
    assert!(summary["bounds"].as_object().unwrap().contains_key("kappa_w"));
}

#[test]
fn unknown_flag_values_are_validation_errors() {
    assert_eq!(asianq(&["build", "--kind", "bogus"]).status.code(), Some(2));
    assert_eq!(asianq(&["build", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(asianq(&["build", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_code_three() {
    // a pricing point far outside the extracted η window fails in the price stage
    let o = asianq(&["price", "--preset", "smoke", "--scenario", "far:1:40:0.5"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("price"));
}

#[test]
fn flags_override_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let o = asianq(&[
        "build",
        "--preset",
        "smoke",
        "--n-tau1",
        "4",
        "--solver",
        "gmres",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["n_tau1"], 4);
    assert_eq!(cfg["solver"], "gmres");
    assert_eq!(cfg["params"]["sigma"], 2.0);
}

#[test]
fn dump_encoding_emits_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let o = asianq(&["dump-encoding", "--preset", "smoke", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let list: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(list.len(), 8);
    for e in &list {
        assert!(e["alpha"].as_f64().unwrap() > 0.0);
        if let Some(d) = e["projection_error"].as_f64() {
            assert!(d < 1e-9, "{}", e["label"]);
        }
    }
    assert!(dir.path().join("C_tau1.csv").exists());
}

#[test]
fn converge_rejects_short_sweeps() {
    assert_eq!(asianq(&["converge", "--preset", "smoke", "--levels", "1"]).status.code(), Some(2));
}

#[test]
fn committed_defaults_and_presets_are_current() {
    let dir = tempfile::tempdir().unwrap();
    let defaults = dir.path().join("defaults.json");
    assert!(asianq(&["defaults", "--out", defaults.to_str().unwrap()]).status.success());
    assert_eq!(fs::read_to_string(&defaults).unwrap(), fs::read_to_string(repo_root().join("defaults.json")).unwrap());
    let presets = dir.path().join("presets");
    assert!(asianq(&["presets", "--out", presets.to_str().unwrap()]).status.success());
    for entry in fs::read_dir(&presets).unwrap() {
        let path = entry.unwrap().path();
        let committed = repo_root().join("presets").join(path.file_name().unwrap());
        assert_eq!(fs::read_to_string(&path).unwrap(), fs::read_to_string(committed).unwrap(), "{path:?}");
    }
}
