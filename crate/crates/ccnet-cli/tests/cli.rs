//! End-to-end tests of the `ccn` binary: flows, exit codes, determinism and
//! atomicity.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccnet::eval;

fn ccn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn ccn")
}

fn stdout_json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| l.trim_start().starts_with('{'))
        .map(|l| serde_json::from_str(l).expect("stdout line is JSON"))
        .collect()
}

fn last_json(out: &Output) -> serde_json::Value {
    let body = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(body.trim()).unwrap_or_else(|_| {
        stdout_json_lines(out)
            .pop()
            .unwrap_or_else(|| panic!("no JSON on stdout: {body}"))
    })
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Recursively collects (relative path, bytes) pairs, skipping run manifests
/// (they contain timestamps).
fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        paths.sort();
        for p in paths {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel.ends_with("run_manifest.json") {
                    continue;
                }
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "model": { "num_blocks": 1, "stack_filters": [8,8,8,8,8], "stack_kernel": 3,
             "hidden_width": 8, "context_kernel": 8 },
  "train": { "window_len": 128, "window_hop": 64, "batch_size": 4,
             "max_epochs": 2, "patience": 2 }
}"#,
    )
    .unwrap();
    path
}

fn write_fold_file(dir: &Path, train: &[u32], val: &[u32]) -> PathBuf {
    let path = dir.join("fold.json");
    let body = serde_json::json!({
        "fold_id": 9,
        "train_subjects": train,
        "val_subjects": val,
        "excluded_val_stimuli": ["AB1"],
    });
    fs::write(&path, body.to_string()).unwrap();
    path
}

#[test]
fn synth_counts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccn(
        &["synth", "--subjects", "4", "--per-subject", "2", "--T", "192", "--seed", "7", "--out", "a"],
        tmp.path(),
    );
    assert_code(&out, 0);
    assert_eq!(last_json(&out)["recordings"], 8);
    let out2 = ccn(
        &["synth", "--subjects", "4", "--per-subject", "2", "--T", "192", "--seed", "7", "--out", "b"],
        tmp.path(),
    );
    assert_code(&out2, 0);
    assert_eq!(tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")));
}

#[test]
fn synth_rejects_bad_flags_and_existing_out() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccn(
        &["synth", "--subjects", "1", "--per-subject", "1", "--T", "0", "--seed", "1", "--out", "x"],
        tmp.path(),
    );
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--T"));
    assert!(!tmp.path().join("x").exists(), "no partial outputs on failure");

    fs::create_dir(tmp.path().join("y")).unwrap();
    let out = ccn(
        &["synth", "--subjects", "1", "--per-subject", "1", "--T", "32", "--seed", "1", "--out", "y"],
        tmp.path(),
    );
    assert_code(&out, 3);
}

#[test]
fn train_rejects_fold_out_of_range() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccn(
        &["train", "--fold", "5", "--seed", "1", "--data", "d", "--out", "m.ckpt"],
        tmp.path(),
    );
    assert_code(&out, 2);
}

#[test]
fn train_errors_on_empty_split() {
    let tmp = tempfile::tempdir().unwrap();
    assert_code(
        &ccn(
            &["synth", "--subjects", "2", "--per-subject", "1", "--T", "192", "--seed", "3", "--out", "data"],
            tmp.path(),
        ),
        0,
    );
    let cfg = write_small_config(tmp.path());
    // built-in fold 1 trains on subjects 27..85; this dataset has subjects 1..2
    let out = ccn(
        &[
            "train", "--fold", "1", "--seed", "1", "--data", "data",
            "--config", cfg.to_str().unwrap(), "--out", "m.ckpt",
        ],
        tmp.path(),
    );
    assert_code(&out, 4);
    assert!(!tmp.path().join("m.ckpt").exists());
}

#[test]
fn train_is_deterministic_and_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    assert_code(
        &ccn(
            &["synth", "--subjects", "3", "--per-subject", "2", "--T", "256", "--seed", "5", "--out", "data"],
            tmp.path(),
        ),
        0,
    );
    let cfg = write_small_config(tmp.path());
    let fold = write_fold_file(tmp.path(), &[1, 2], &[3]);
    for name in ["m1.ckpt", "m2.ckpt"] {
        let out = ccn(
            &[
                "train", "--fold-file", fold.to_str().unwrap(), "--seed", "11",
                "--data", "data", "--config", cfg.to_str().unwrap(), "--out", name,
            ],
            tmp.path(),
        );
        assert_code(&out, 0);
    }
    let a = fs::read(tmp.path().join("m1.ckpt")).unwrap();
    let b = fs::read(tmp.path().join("m2.ckpt")).unwrap();
    assert_eq!(a, b, "same flags must give identical checkpoint bytes");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("m1.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["fold_id"], 9);
    assert!(manifest["artifact_fnv64"].as_object().unwrap().len() == 1);
}

#[test]
fn builtin_fold_selects_training_subjects() {
    let tmp = tempfile::tempdir().unwrap();
    // subjects 1..85, one tiny recording each
    assert_code(
        &ccn(
            &["synth", "--subjects", "85", "--per-subject", "1", "--T", "160", "--seed", "9", "--out", "data"],
            tmp.path(),
        ),
        0,
    );
    let cfg = write_small_config(tmp.path());
    let out = ccn(
        &[
            "train", "--fold", "1", "--seed", "2", "--data", "data",
            "--config", cfg.to_str().unwrap(), "--out", "f1.ckpt",
        ],
        tmp.path(),
    );
    assert_code(&out, 0);
    let report = last_json(&out);
    // fold 1: train subjects 27..85 (59 recordings), val 1..26 (26 recordings);
    // T=160, window 128 hop 64 -> 1 window per recording
    assert_eq!(report["n_train_windows"], 59);
    assert_eq!(report["n_val_windows"], 26);
}

fn overfit_setup(tmp: &Path) -> (PathBuf, PathBuf) {
    assert_code(
        &ccn(
            &["synth", "--subjects", "1", "--per-subject", "1", "--T", "320", "--seed", "41", "--out", "data"],
            tmp,
        ),
        0,
    );
    // the same recording serves as both train and validation material: clone
    // it under a second subject id so the fold split accepts it
    fs::create_dir_all(tmp.join("data/sub002_clone")).unwrap();
    for f in ["eeg.raw", "mel.raw", "env.raw"] {
        fs::copy(
            tmp.join("data/sub001_rec00").join(f),
            tmp.join("data/sub002_clone").join(f),
        )
        .unwrap();
    }
    let mut manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.join("data/sub001_rec00/manifest")).unwrap(),
    )
    .unwrap();
    manifest["subject_id"] = serde_json::json!(2);
    manifest["stimulus_id"] = serde_json::json!("CLONE");
    fs::write(tmp.join("data/sub002_clone/manifest"), manifest.to_string()).unwrap();

    // train-split-only copy for scoring the overfit model on what it saw
    fs::create_dir_all(tmp.join("train_only/sub001_rec00")).unwrap();
    for f in ["manifest", "eeg.raw", "mel.raw", "env.raw"] {
        fs::copy(
            tmp.join("data/sub001_rec00").join(f),
            tmp.join("train_only/sub001_rec00").join(f),
        )
        .unwrap();
    }
    let cfg = tmp.join("config.json");
    fs::write(
        &cfg,
        r#"{
  "model": { "num_blocks": 1, "stack_filters": [32,32,32,16,16], "stack_kernel": 8,
             "hidden_width": 16, "context_kernel": 32 },
  "train": { "window_len": 320, "window_hop": 64, "batch_size": 1,
             "max_epochs": 200, "patience": 200 }
}"#,
    )
    .unwrap();
    let fold = write_fold_file(tmp, &[1], &[2]);
    (cfg, fold)
}

#[test]
fn predict_then_eval_on_overfit_training_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, fold) = overfit_setup(tmp.path());
    let out = ccn(
        &[
            "train", "--fold-file", fold.to_str().unwrap(), "--seed", "7",
            "--data", "data", "--config", cfg.to_str().unwrap(), "--out", "over.ckpt",
        ],
        tmp.path(),
    );
    assert_code(&out, 0);
    let out = ccn(
        &["predict", "--ckpt", "over.ckpt", "--data", "train_only", "--out", "preds"],
        tmp.path(),
    );
    assert_code(&out, 0);
    // output T equals the recording's T
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("preds/manifest")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["recordings"][0]["t_samples"], 320);
    assert_eq!(manifest["recordings"][0]["rows"], 11);

    let out = ccn(&["eval", "--pred", "preds", "--data", "train_only"], tmp.path());
    assert_code(&out, 0);
    let report = last_json(&out);
    let mean_r = report["mean_r"].as_f64().unwrap();
    assert!(mean_r >= 0.95, "overfit training-split score {mean_r} < 0.95");
    assert_eq!(report["subband_r"].as_array().unwrap().len(), 10);
    let sub_mean: f64 = report["subband_r"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum::<f64>()
        / 10.0;
    assert!((mean_r - sub_mean).abs() < 1e-9);
}

#[test]
fn predict_rejects_corrupt_checkpoint_without_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    assert_code(
        &ccn(
            &["synth", "--subjects", "1", "--per-subject", "1", "--T", "64", "--seed", "1", "--out", "data"],
            tmp.path(),
        ),
        0,
    );
    fs::write(tmp.path().join("bad.ckpt"), b"XXXX not a checkpoint").unwrap();
    let out = ccn(
        &["predict", "--ckpt", "bad.ckpt", "--data", "data", "--out", "preds"],
        tmp.path(),
    );
    assert_code(&out, 5);
    assert!(!tmp.path().join("preds").exists());
}

#[test]
fn singleton_ensemble_equals_znormalized_member() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, fold) = {
        // quick 2-epoch model, any quality works here
        assert_code(
            &ccn(
                &["synth", "--subjects", "3", "--per-subject", "1", "--T", "192", "--seed", "2", "--out", "data"],
                tmp.path(),
            ),
            0,
        );
        (write_small_config(tmp.path()), write_fold_file(tmp.path(), &[1, 2], &[3]))
    };
    assert_code(
        &ccn(
            &[
                "train", "--fold-file", fold.to_str().unwrap(), "--seed", "3",
                "--data", "data", "--config", cfg.to_str().unwrap(), "--out", "m.ckpt",
            ],
            tmp.path(),
        ),
        0,
    );
    assert_code(
        &ccn(&["predict", "--ckpt", "m.ckpt", "--data", "data", "--out", "p"], tmp.path()),
        0,
    );
    assert_code(&ccn(&["ensemble", "--preds", "p", "--out", "e"], tmp.path()), 0);
    let (members, _) = eval::load_predictions(&tmp.path().join("p")).unwrap();
    let (combined, manifest) = eval::load_predictions(&tmp.path().join("e")).unwrap();
    assert_eq!(manifest.normalization, "znorm");
    for (m, c) in members.iter().zip(&combined) {
        let z = eval::znormalize(m);
        // both sides round-trip f32 files, so compare at f32 resolution
        for (a, b) in z.values.data().iter().zip(c.values.data()) {
            assert!((*a as f32 - *b as f32).abs() <= f32::EPSILON * 8.0 * (a.abs() as f32 + 1.0));
        }
    }
}

#[test]
fn ensemble_rejects_mismatched_recording_sets() {
    let tmp = tempfile::tempdir().unwrap();
    assert_code(
        &ccn(
            &["synth", "--subjects", "3", "--per-subject", "1", "--T", "128", "--seed", "4", "--out", "data"],
            tmp.path(),
        ),
        0,
    );
    let cfg = write_small_config(tmp.path());
    let fold = write_fold_file(tmp.path(), &[1, 2], &[3]);
    assert_code(
        &ccn(
            &[
                "train", "--fold-file", fold.to_str().unwrap(), "--seed", "3",
                "--data", "data", "--config", cfg.to_str().unwrap(), "--out", "m.ckpt",
            ],
            tmp.path(),
        ),
        0,
    );
    assert_code(
        &ccn(&["predict", "--ckpt", "m.ckpt", "--data", "data", "--out", "pa"], tmp.path()),
        0,
    );
    // second member covering a subset of recordings
    fs::create_dir(tmp.path().join("data2")).unwrap();
    for sub in ["sub001_rec00", "sub002_rec00"] {
        fs::create_dir(tmp.path().join("data2").join(sub)).unwrap();
        for f in ["manifest", "eeg.raw", "mel.raw", "env.raw"] {
            fs::copy(
                tmp.path().join("data").join(sub).join(f),
                tmp.path().join("data2").join(sub).join(f),
            )
            .unwrap();
        }
    }
    assert_code(
        &ccn(&["predict", "--ckpt", "m.ckpt", "--data", "data2", "--out", "pb"], tmp.path()),
        0,
    );
    let out = ccn(&["ensemble", "--preds", "pa", "--preds", "pb", "--out", "e"], tmp.path());
    assert_code(&out, 6);
    assert!(!tmp.path().join("e").exists());
}

#[test]
fn gradcheck_passes_and_detects_injected_bug() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccn(&["gradcheck", "--cases", "3"], tmp.path());
    assert_code(&out, 0);
    let lines = stdout_json_lines(&out);
    let ops: Vec<&str> = lines
        .iter()
        .filter_map(|l| l.get("op").and_then(|v| v.as_str()))
        .collect();
    for expected in [
        "pointwise_conv",
        "linear_per_timestep",
        "depthwise_temporal_conv",
        "temporal_conv",
        "layer_norm",
        "leaky_relu",
        "causal_pad",
        "concat_channels",
        "spatial_attention",
        "pearson_loss",
    ] {
        assert!(ops.contains(&expected), "suite must cover {expected}");
    }
    let summary = lines.last().unwrap();
    assert_eq!(summary["all_passed"], true);

    let out = ccn(&["gradcheck", "--cases", "2", "--corrupt"], tmp.path());
    assert_code(&out, 1);
}
