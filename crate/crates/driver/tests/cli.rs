use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn reference() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

fn kmsuq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmsuq")).args(args).output().expect("binary runs")
}

fn run_to(scenario: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![scenario, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    kmsuq(&args)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest(dir: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join("manifest.csv")).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn manifest_lists_every_artifact_with_its_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_to("assumptions", &reference(), tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = manifest(tmp.path());
    assert_eq!(rows[0], ["input", "scenario", "assumptions"]);
    assert_eq!(rows[1][1], "config_sha256");
    let listed: Vec<&str> = rows.iter().filter(|r| r[0] == "output").map(|r| r[1].as_str()).collect();
    let mut on_disk: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.csv")
        .collect();
    on_disk.sort();
    let mut sorted = listed.clone();
    sorted.sort();
    assert_eq!(sorted, on_disk);
    for r in rows.iter().filter(|r| r[0] == "output") {
        assert_eq!(r[2], sha256_hex(&fs::read(tmp.path().join(&r[1])).unwrap()), "{}", r[1]);
    }
    // The dumped config is what the hash covers.
    let dumped = fs::read(tmp.path().join("config.toml")).unwrap();
    assert_eq!(rows[1][2], sha256_hex(&dumped));
}

#[test]
fn identical_runs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run_to("spectrum", &reference(), d.path(), &["--threads", "2"]);
        assert_eq!(out.status.code(), Some(0));
    }
    for r in manifest(a.path()) {
        if r[0] == "output" {
            assert_eq!(fs::read(a.path().join(&r[1])).unwrap(), fs::read(b.path().join(&r[1])).unwrap(), "{}", r[1]);
        }
    }
    assert_eq!(
        fs::read(a.path().join("manifest.csv")).unwrap(),
        fs::read(b.path().join("manifest.csv")).unwrap()
    );
}

#[test]
fn unknown_key_is_a_config_error_with_a_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[kernel]\ngamm = 0.5\n").unwrap();
    let out = run_to("assumptions", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gamm") && err.contains("gamma"), "{err}");
}

#[test]
fn every_violation_is_reported_at_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[sim]\ndt = -1.0\n[grid]\nn_per_axis = 1\n").unwrap();
    let out = run_to("relax", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dt") && err.contains("n_per_axis"), "{err}");
}

#[test]
fn missing_config_and_bad_arguments_exit_with_config_status() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_to("relax", &tmp.path().join("absent.toml"), &tmp.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = reference();
    let out = kmsuq(&["no-such-scenario", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_to("relax", &cfg, &tmp.path().join("out"), &["--threads", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn strict_mode_turns_soft_failures_into_errors() {
    // The reference C_B sweep is not monotone, which is a soft check.
    let tmp = tempfile::tempdir().unwrap();
    let relaxed = run_to("spectrum", &reference(), &tmp.path().join("a"), &[]);
    assert_eq!(relaxed.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&relaxed.stdout).contains("FAIL C_B nonincreasing"));
    let strict = run_to("spectrum", &reference(), &tmp.path().join("b"), &["--strict"]);
    assert_eq!(strict.status.code(), Some(1));
}
