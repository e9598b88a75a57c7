//! Exit codes and the one-line error format of the `dasnet` binary.

use std::path::Path;
use std::process::{Command, Output};

fn dasnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dasnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Asserts a single `error kind=<kind> msg="..."` line on stderr.
fn assert_error(o: &Output, code: i32, kind: &str, needle: &str) {
    let err = stderr(o);
    assert_eq!(o.status.code(), Some(code), "{err}");
    assert!(o.stdout.is_empty());
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(
        err.starts_with(&format!("error kind={kind} msg=\"")),
        "{err}"
    );
    assert!(err.contains(needle), "{err} lacks {needle}");
}

fn small_dataset(dir: &Path) {
    let o = dasnet(
        dir,
        &[
            "gen-data",
            "--seed",
            "3",
            "--n",
            "4",
            "--mask-fraction",
            "1",
            "--out",
            "data",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"], &["predict", "--help"]] {
        let o = dasnet(dir.path(), args);
        assert!(o.status.success(), "{args:?}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_error(
        &dasnet(dir.path(), &["frobnicate"]),
        2,
        "usage",
        "frobnicate",
    );
}

#[test]
fn missing_required_flag_named() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    assert_error(
        &dasnet(dir.path(), &["eval-semantic", "--data", "data"]),
        1,
        "usage",
        "ckpt",
    );
}

#[test]
fn missing_dataset_is_io_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = dasnet(
        dir.path(),
        &[
            "train-detector",
            "--data",
            "nowhere",
            "--steps",
            "1",
            "--out",
            "d.ckpt",
        ],
    );
    assert_error(&o, 1, "io", "nowhere");
    assert!(!dir.path().join("d.ckpt").exists());
}

#[test]
fn corrupt_checkpoint_is_located_format_error() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    std::fs::write(dir.path().join("bad.ckpt"), b"DASNETCK\x01").unwrap();
    let o = dasnet(
        dir.path(),
        &["eval-semantic", "--data", "data", "--ckpt", "bad.ckpt"],
    );
    assert_error(&o, 1, "format", "bad.ckpt");
    assert!(stderr(&o).contains("byte offset"));
}

#[test]
fn wrong_stage_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let o = dasnet(
        dir.path(),
        &[
            "train-detector",
            "--data",
            "data",
            "--steps",
            "1",
            "--batch",
            "1",
            "--out",
            "det.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dasnet(
        dir.path(),
        &["eval-semantic", "--data", "data", "--ckpt", "det.ckpt"],
    );
    assert_error(&o, 1, "usage", "expected stage semantic, found detector");
}

#[test]
fn malformed_config_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), "{\"n\": \"many\"}").unwrap();
    let o = dasnet(
        dir.path(),
        &["gen-data", "--config", "cfg.json", "--out", "data"],
    );
    assert_error(&o, 1, "config", "cfg.json");
}

#[test]
fn config_file_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        "{\"n\": 3, \"seed\": 9, \"mask-fraction\": 1.0}",
    )
    .unwrap();
    let o = dasnet(
        dir.path(),
        &["gen-data", "--config", "cfg.json", "--out", "a"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dasnet(
        dir.path(),
        &[
            "gen-data",
            "--n",
            "3",
            "--seed",
            "9",
            "--mask-fraction",
            "1",
            "--out",
            "b",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let list = |d: &str| {
        let mut v: Vec<_> = std::fs::read_dir(dir.path().join(d))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        v.sort();
        v
    };
    assert_eq!(list("a"), list("b"));
    for name in list("a") {
        let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
}
