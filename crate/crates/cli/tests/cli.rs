use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::DType;
use lipsync::sync_model::{LipSyncModel, ModelConfig, ModelPart};
use lipsync::training::{Checkpoint, SaveOptions};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn lipsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipsync"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn gen(dir: &Path, clips: usize, frames: usize) -> PathBuf {
    let out = lipsync(&[
        "gen-synthetic",
        "--out",
        dir.to_str().unwrap(),
        "--override",
        &format!("synthetic.n_clips={clips}"),
        "--override",
        &format!("synthetic.clip_len_frames={frames}"),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    dir.join("manifest.jsonl")
}

/// A freshly initialized tiny model saved as a checkpoint, optionally restricted to some parts.
fn checkpoint(dir: &Path, parts: Vec<ModelPart>) -> PathBuf {
    let model = LipSyncModel::new(ModelConfig::tiny(), 0, DType::F32).unwrap();
    let path = dir.join("init.ckpt");
    Checkpoint::from_model(
        &model,
        0,
        SaveOptions {
            parts,
            ..Default::default()
        },
    )
    .unwrap()
    .save(&path)
    .unwrap();
    path
}

#[test]
fn missing_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lipsync(&[
        "train",
        "--manifest",
        dir.path().join("nope.jsonl").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("manifest not found"));
}

#[test]
fn unknown_override_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = lipsync(&[
        "gen-synthetic",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "synthetic.n_clipz=3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("n_clipz"));
}

#[test]
fn generation_is_reproducible_and_preprocess_caches_mels() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = gen(a.path(), 3, 40);
    gen(b.path(), 3, 40);
    assert_eq!(fs::read(&ma).unwrap(), fs::read(b.path().join("manifest.jsonl")).unwrap());
    let wav = "clips/clip_0002/audio.wav";
    assert_eq!(fs::read(a.path().join(wav)).unwrap(), fs::read(b.path().join(wav)).unwrap());
    let out = lipsync(&["preprocess", "--manifest", ma.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(a.path().join("clips/clip_0000/audio.mel").is_file());
}

#[test]
fn train_logs_window_sizes_and_zero_steps_writes_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(&dir.path().join("data"), 10, 40);
    let run = dir.path().join("run");
    let out = lipsync(&[
        "train",
        "--config",
        tiny_config().to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--override",
        "sampler.visual_len=10",
        "--override",
        "train.max_steps=0",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let log = text(&out.stderr);
    assert!(log.contains("t_a = 32"), "{log}");
    assert!(log.contains("resolved config"), "{log}");
    let mut written: Vec<String> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    written.sort();
    assert_eq!(written, vec!["checkpoint_000000.ckpt", "metrics.jsonl"]);
}

#[test]
fn eval_prints_context_columns_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(&dir.path().join("data"), 10, 50);
    let ck = checkpoint(dir.path(), Vec::new());
    let report = dir.path().join("report.json");
    let out = lipsync(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--contexts",
        "5,15",
        "--tolerance",
        "1",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("5 (0.2s)") && stdout.contains("15 (0.6s)"), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let rows = json["per_context"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["context_len"], 5);
    assert!(json.get("skipped").is_some() && json.get("score_histogram").is_some() && json.get("config").is_some());
}

#[test]
fn eval_on_an_empty_split_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(&dir.path().join("data"), 10, 40);
    let full = fs::read_to_string(&manifest).unwrap();
    let kept: Vec<&str> = full.lines().filter(|l| !l.contains("\"test\"")).collect();
    let trimmed = dir.path().join("data/no_test.jsonl");
    fs::write(&trimmed, kept.join("\n")).unwrap();
    let ck = checkpoint(dir.path(), Vec::new());
    let report = dir.path().join("empty.json");
    let out = lipsync(&[
        "eval",
        "--manifest",
        trimmed.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["per_context"].as_array().unwrap().iter().all(|r| r["n"] == 0));
}

#[test]
fn offset_reports_short_clips_and_unwritable_fix_paths() {
    let dir = tempfile::tempdir().unwrap();
    gen(&dir.path().join("data"), 1, 40);
    let ck = checkpoint(dir.path(), Vec::new());
    let clip = dir.path().join("data/clips/clip_0000");
    let frames = clip.join("frames");
    let audio = clip.join("audio.wav");
    let base = [
        "offset",
        "--frames",
        frames.to_str().unwrap(),
        "--audio",
        audio.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ];
    let mut short = base.to_vec();
    short.extend(["--context", "15"]);
    assert_eq!(lipsync(&short).status.code(), Some(4));

    let out = lipsync(&base);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("offset: "), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with(['+', '-'])).count(), 31);

    let bad = dir.path().join("missing_dir/fixed.wav");
    let mut fix = base.to_vec();
    fix.extend(["--fix", bad.to_str().unwrap()]);
    let out = lipsync(&fix);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("I/O error"));
}

#[test]
fn export_features_is_deterministic_and_needs_visual_weights() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(&dir.path().join("data"), 3, 40);
    let ck = checkpoint(dir.path(), vec![ModelPart::VisualEncoder]);
    let run = |out: &Path| {
        lipsync(&[
            "export-features",
            "--manifest",
            manifest.to_str().unwrap(),
            "--checkpoint",
            ck.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let (a, b) = (dir.path().join("fa"), dir.path().join("fb"));
    assert!(run(&a).status.success());
    assert!(run(&b).status.success());
    for i in 0..3 {
        let name = format!("clip_{i:04}.feat");
        let bytes = fs::read(a.join(&name)).unwrap();
        assert_eq!(bytes, fs::read(b.join(&name)).unwrap());
        let (rows, cols) = (
            u32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
        );
        assert_eq!((rows, cols), (32, 40));
    }

    let classifier_only = checkpoint(&dir.path().join("fa"), vec![ModelPart::Classifier]);
    let out = lipsync(&[
        "export-features",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        classifier_only.to_str().unwrap(),
        "--out",
        dir.path().join("fc").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(text(&out.stderr).contains("visual encoder weights absent"));
}
