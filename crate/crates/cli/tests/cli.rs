// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str =
    "seed = 7\n\n[synth]\nn_samples = 800\nn_speakers = 40\n\n[sae]\nlatent_dim = 32\nk = 4\nepochs = 2\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latent-lens"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("LATENT_LENS_OUT")
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn steer_without_probe_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for cmd in ["synth", "train"] {
        assert!(run(dir.path(), &["--config", &cfg, cmd]).status.success());
    }
    let out = run(dir.path(), &["--config", &cfg, "steer"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "missing_artifact");
    assert!(err["path"].as_str().unwrap().ends_with("probe_music.json"));
}

#[test]
fn train_without_corpus_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train"]).status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    for text in [
        "[sae]\nlatent_dim = \"many\"\n",
        "[sae]\nunknown_knob = 1\n",
        "seed = 1\n[synth]\nn_samples = 0\n",
    ] {
        std::fs::write(&bad, text).unwrap();
        let out = run(dir.path(), &["--config", bad.to_str().unwrap(), "synth"]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{text}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let missing = dir.path().join("nope.toml");
    assert_eq!(
        run(dir.path(), &["--config", missing.to_str().unwrap(), "synth"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("corpus.embc")).unwrap();
    for (d, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        assert!(run(&dir.path().join(d), &["--config", &cfg, "--seed", seed, "synth"])
            .status
            .success());
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["synth"]["seed"], 7);
    assert_eq!(meta["synth"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn export_reports_gaps_for_missing_sections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for cmd in ["synth", "train", "probe", "export"] {
        let out = run(dir.path(), &["--config", &cfg, cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["probe"]["spanish"]["phi"].is_u64());
    assert!(report["steering"].is_null());
    let gaps: Vec<&str> = report["gaps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["section"].as_str().unwrap())
        .collect();
    assert_eq!(gaps, ["heatmap", "steering", "histograms", "flows"]);

    assert!(run(dir.path(), &["--config", &cfg, "steer"]).status.success());
    assert!(run(dir.path(), &["--config", &cfg, "export"]).status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["histograms"]["music"]["positive_after"]["counts"].is_array());
    assert!(dir.path().join("report_steering_means.csv").is_file());
}
