#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// The `hfgd` binary in single-threaded deterministic mode.
pub fn hfgd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfgd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HFGD_THREADS")
        .output()
        .expect("spawn hfgd")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `dir`, relative path and bytes, sorted by path.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Generates a small 32 px dataset under `dir/name`.
pub fn tiny_data(dir: &Path, name: &str, n: &str) {
    let out = hfgd(&["gen-data", "--out", name, "--n", n, "--seed", "3", "--spec-set", "image_size=32"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

/// Invocations that must be rejected as usage errors, one or more per
/// command. Expects `tiny_data(dir, "data", ..)` to exist.
pub const USAGE_CASES: &[&[&str]] = &[
    &[],
    &["no-such-command"],
    &["gen-data", "--out", "x", "--n", "2"],
    &["gen-data", "--out", "x", "--n", "2", "--seed", "1", "--spec-set", "image_size=33"],
    &["gen-data", "--out", "data", "--n", "2", "--seed", "1"],
    &["train", "--data", "data", "--out", "t", "--set", "bogus=1"],
    &["train", "--data", "data", "--out", "t", "--set", "lr0"],
    &["train", "--data", "data", "--out", "t", "--set", "batch_size=2"],
    &["train", "--data", "data", "--out", "t", "--config", "missing.txt"],
    &["eval", "--checkpoint", "c", "--data", "data", "--head", "middle"],
    &["audit", "--batches", "0"],
    &["audit", "--set", "target_os=3"],
    &["gradcheck", "--seed", "x"],
    &["pretrain", "--out", "p", "--set", "iters=0"],
    &["ablate", "--out", "a", "--seeds", "0", "--rows", "nope"],
    &["probe", "--out", "b", "--init", "sometimes"],
    &["predict", "--checkpoint", "c", "--input", "i"],
];

/// Well-formed invocations that fail at run time.
pub const RUNTIME_CASES: &[&[&str]] = &[
    &["train", "--data", "missing", "--out", "t"],
    &["train", "--data", "data", "--out", "t", "--set", "num_classes=4"],
    &["eval", "--checkpoint", "missing", "--data", "data"],
    &["predict", "--checkpoint", "missing", "--input", "data", "--out", "p"],
    &["audit", "--batches", "1", "--set", "lateral_stop_grad_enabled=false"],
    &["audit", "--batches", "1", "--expect-negative"],
];

/// Cheap successful invocations, in dependency order.
pub const SUCCESS_CASES: &[&[&str]] = &[
    &["train", "--data", "data", "--eval-data", "data", "--out", "ok_t", "--set", "total_iters=2", "batch_size=4", "eval_every=1"],
    &["eval", "--checkpoint", "ok_t/checkpoint", "--data", "data", "--head", "teacher"],
    &["predict", "--checkpoint", "ok_t/checkpoint", "--input", "data", "--out", "ok_p", "--tokens-csv"],
    &["audit", "--batches", "1", "--batch-size", "4", "--out", "ok_audit"],
    &["audit", "--batches", "1", "--set", "lateral_stop_grad_enabled=false", "--expect-negative"],
    &["gradcheck", "--ops-only"],
    &["pretrain", "--out", "ok_pre", "--set", "samples=32", "eval_samples=16", "iters=3", "--spec-set", "image_size=32"],
    &["train", "--data", "data", "--out", "ok_t3", "--config", "ok_t/run_manifest.txt", "--set", "total_iters=1"],
];

/// Runs every case table in a fresh directory; returns the mismatches.
pub fn exit_code_mismatches() -> Vec<String> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d, "data", "4");
    let mut bad = Vec::new();
    for (cases, want) in [(USAGE_CASES, 2), (RUNTIME_CASES, 1), (SUCCESS_CASES, 0)] {
        for args in cases {
            let out = hfgd(args, d);
            if code(&out) != want {
                bad.push(format!("{args:?}: exit {} (want {want}): {}", code(&out), stderr(&out).trim()));
            }
        }
    }
    bad
}
