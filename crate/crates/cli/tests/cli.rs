mod common;

use std::collections::BTreeSet;

use common::{code, exit_code_mismatches, hfgd, stderr, stdout, tiny_data, tree, USAGE_CASES};
use hfgd::config::KeyValue;
use hfgd::data::SceneSpec;
use hfgd::model::ModelConfig;
use hfgd::tensor::io::HfgtTensor;
use hfgd::train::{PretrainConfig, TrainConfig};

/// `(key, default)` pairs listed under a help section.
fn listed_keys(help: &str) -> BTreeSet<(String, String)> {
    help.lines()
        .filter(|l| l.starts_with("  ") && !l.starts_with("   ") && !l.trim_start().starts_with('-'))
        .filter_map(|l| l.trim().split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn expected<T: KeyValue>() -> BTreeSet<(String, String)> {
    T::default().pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let help = |cmd: &str| {
        let out = hfgd(&[cmd, "--help"], dir.path());
        assert_eq!(code(&out), 0);
        listed_keys(&stdout(&out))
    };
    let model_train: BTreeSet<_> = expected::<ModelConfig>().union(&expected::<TrainConfig>()).cloned().collect();
    for cmd in ["train", "audit", "ablate", "probe"] {
        assert_eq!(help(cmd), model_train, "{cmd}");
    }
    assert_eq!(help("gen-data"), expected::<SceneSpec>());
    let pre: BTreeSet<_> = expected::<PretrainConfig>().union(&expected::<ModelConfig>()).cloned().collect();
    assert_eq!(help("pretrain"), pre);
    // the tables are generated, so spot-check one literal default
    assert!(help("train").contains(&("lr0".to_string(), "0.01".to_string())));
}

#[test]
fn exit_codes_follow_the_contract() {
    let bad = exit_code_mismatches();
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

#[test]
fn refused_commands_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d, "data", "4");
    for args in USAGE_CASES {
        assert_eq!(code(&hfgd(args, d)), 2, "{args:?}");
    }
    for p in ["x", "t", "p", "a", "b"] {
        assert!(!d.join(p).exists(), "{p}");
    }
}

#[test]
fn runtime_errors_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d, "data", "4");
    std::fs::write(d.join("garbage.hfgt"), b"not a tensor").unwrap();
    let out = hfgd(&["train", "--data", "data", "--out", "t", "--set", "total_iters=1", "batch_size=4"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = hfgd(&["predict", "--checkpoint", "t/checkpoint", "--input", "garbage.hfgt", "--out", "p"], d);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("garbage.hfgt"));
    let out = hfgd(&["train", "--data", "data", "--out", "t2", "--set", "num_classes=4"], d);
    assert!(stderr(&out).contains("6 classes"), "{}", stderr(&out));
}

#[test]
fn commands_succeed_with_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d, "data", "8");
    assert_eq!(std::fs::read_dir(d.join("data")).unwrap().count(), 17);
    let ok = |args: &[&str]| {
        let out = hfgd(args, d);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        stdout(&out)
    };
    ok(&["train", "--data", "data", "--eval-data", "data", "--out", "t", "--set", "total_iters=2", "batch_size=4", "eval_every=1"]);
    for f in ["checkpoint/weights.hfgt", "checkpoint/model.txt", "metrics.csv", "eval.csv", "run_manifest.txt"] {
        assert!(d.join("t").join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(d.join("t/metrics.csv")).unwrap().lines().count(), 3);
    assert!(ok(&["eval", "--checkpoint", "t/checkpoint", "--data", "data", "--head", "teacher"]).contains("mIoU"));
    ok(&["audit", "--batches", "1", "--batch-size", "4", "--out", "audit"]);
    assert!(std::fs::read_to_string(d.join("audit/audit.txt")).unwrap().contains("zero-by-topology"));
    ok(&["audit", "--batches", "1", "--set", "lateral_stop_grad_enabled=false", "--expect-negative"]);
    assert!(ok(&["gradcheck", "--ops-only"]).contains("0 failed"));
    ok(&["pretrain", "--out", "pre", "--set", "samples=32", "eval_samples=16", "iters=3", "--spec-set", "image_size=32"]);
    assert!(d.join("pre/pretrain.txt").exists());
    // the manifest of one run is a valid config for the next
    ok(&["train", "--data", "data", "--out", "t3", "--config", "t/run_manifest.txt", "--set", "total_iters=1"]);
}

#[test]
fn outputs_are_refused_then_reproduced_with_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d, "data", "6");
    let first = tree(&d.join("data"));
    let again = hfgd(&["gen-data", "--out", "data", "--n", "6", "--seed", "3", "--spec-set", "image_size=32"], d);
    assert_eq!(code(&again), 2);
    assert_eq!(tree(&d.join("data")), first);
    let forced = hfgd(
        &["gen-data", "--out", "data", "--n", "6", "--seed", "3", "--spec-set", "image_size=32", "--overwrite"],
        d,
    );
    assert_eq!(code(&forced), 0);
    assert_eq!(tree(&d.join("data")), first);
}

#[test]
fn predictions_are_label_maps_and_ppm_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d, "data", "3");
    let out = hfgd(&["train", "--data", "data", "--out", "t", "--set", "total_iters=1", "batch_size=4"], d);
    assert_eq!(code(&out), 0);
    let out = hfgd(
        &["predict", "--checkpoint", "t/checkpoint", "--input", "data", "--out", "p", "--tokens-csv"],
        d,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for i in 0..3 {
        let (dims, labels) = HfgtTensor::load(&d.join(format!("p/pred_{i:05}.hfgt")))
            .unwrap()
            .into_u16()
            .unwrap();
        assert_eq!(dims, vec![32, 32]);
        assert!(labels.iter().all(|&l| l < 6));
        let ppm = std::fs::read(d.join(format!("p/pred_{i:05}.ppm"))).unwrap();
        let header = b"P6 32 32 255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 3 * 32 * 32);
    }
    let tokens = std::fs::read_to_string(d.join("p/tokens.csv")).unwrap();
    assert_eq!(tokens.lines().count(), 7);
    assert!(tokens.lines().nth(1).unwrap().starts_with("c0,1.000000"));
}
