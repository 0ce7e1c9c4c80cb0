use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL_NOISELESS: &str = r#"
[scene]
videos = 3
seed = 4

[pipeline.solver]
rank = 2
"#;

fn multicap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multicap")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = multicap(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Writes a config file and synthesizes a dataset from it.
fn synth(dir: &TempDir, config: &str) -> (String, String) {
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, config).unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", path(&cfg), "--out", path(&data)]);
    (path(&cfg).to_string(), path(&data).to_string())
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let (cfg, data) = synth(&dir, SMALL_NOISELESS);
    let again = dir.path().join("again");
    ok(&["synth", "--config", &cfg, "--out", path(&again)]);
    let (a, b) = (dir_bytes(Path::new(&data)), dir_bytes(&again));
    assert_eq!(a.iter().map(|f| &f.0).collect::<Vec<_>>(), ["config.json", "init_poses.json", "scene.json", "truth.json", "video_0.json", "video_1.json", "video_2.json"]);
    assert!(a == b, "synth output differs between runs");
}

#[test]
fn noiseless_pipeline_recovers_motion_and_eval_agrees() {
    let dir = TempDir::new().unwrap();
    let (cfg, data) = synth(&dir, SMALL_NOISELESS);
    let out = dir.path().join("out");
    let dump = dir.path().join("aff");
    ok(&["pipeline", &data, "--config", &cfg, "--out", path(&out), "--dump-affinity", path(&dump)]);
    let metrics = read_json(&out.join("metrics.json"));
    let p = metrics["p_mpjpe_mm"].as_f64().unwrap();
    assert!(p < 1.0, "p_mpjpe {p} mm");
    assert_eq!(metrics["sync_error_fraction"].as_f64().unwrap(), 0.0);
    let diag = read_json(&out.join("diagnostics.json"));
    assert!(diag["rounds"].as_array().unwrap().len() >= 1);
    for prefix in ["A", "X"] {
        assert!(dump.join(format!("{prefix}_0_1.csv")).exists());
    }

    let scored = dir.path().join("scored");
    ok(&["eval", "--config", &cfg, "--solution", path(&out.join("solution.json")), &data, "--out", path(&scored)]);
    let again = read_json(&scored.join("metrics.json"))["p_mpjpe_mm"].as_f64().unwrap();
    assert!((again - p).abs() < 1e-6, "eval {again} vs pipeline {p}");
}

#[test]
fn sync_then_solve_matches_the_stages() {
    let dir = TempDir::new().unwrap();
    let (cfg, data) = synth(&dir, SMALL_NOISELESS);
    let synced = dir.path().join("synced");
    ok(&["sync", &data, "--config", &cfg, "--out", path(&synced)]);
    assert_eq!(read_json(&synced.join("sync_metrics.json"))["sync_error_fraction"].as_f64().unwrap(), 0.0);
    let solved = dir.path().join("solved");
    ok(&["solve", &data, "--config", &cfg, "--timeline", path(&synced.join("timeline.json")), "--out", path(&solved)]);
    assert!(read_json(&solved.join("metrics.json"))["p_mpjpe_mm"].as_f64().unwrap() < 1.0);
}

#[test]
fn single_video_dataset_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let (cfg, data) = synth(&dir, "[scene]\nvideos = 1\nbase_frames = 40\n\n[scene.desync]\nn_s1 = 10\nn_s2 = 3\n");
    let out = dir.path().join("out");
    ok(&["pipeline", &data, "--config", &cfg, "--out", path(&out)]);
    let solution = read_json(&out.join("solution.json"));
    assert_eq!(solution["videos"].as_array().unwrap().len(), 1);
    assert_eq!(read_json(&out.join("metrics.json"))["sync_error_fraction"].as_f64().unwrap(), 0.0);
}

#[test]
fn missing_truth_skips_metrics() {
    let dir = TempDir::new().unwrap();
    let (cfg, data) = synth(&dir, "[scene]\nvideos = 2\nbase_frames = 30\n\n[scene.desync]\nn_s1 = 8\nn_s2 = 2\n");
    fs::remove_file(Path::new(&data).join("truth.json")).unwrap();
    let out = dir.path().join("out");
    ok(&["pipeline", &data, "--config", &cfg, "--out", path(&out)]);
    assert!(out.join("solution.json").exists());
    assert!(out.join("timeline.json").exists());
    assert!(!out.join("metrics.json").exists());
}

#[test]
fn malformed_video_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let (cfg, data) = synth(&dir, "[scene]\nvideos = 2\nbase_frames = 30\n\n[scene.desync]\nn_s1 = 8\nn_s2 = 2\n");
    let video = Path::new(&data).join("video_1.json");
    let mut doc = read_json(&video);
    doc["frames"][0][0] = serde_json::json!([1.0, 2.0]);
    fs::write(&video, doc.to_string()).unwrap();
    let out = multicap(&["sync", &data, "--config", &cfg, "--out", path(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("video_1.json"), "stderr: {stderr}");
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = TempDir::new().unwrap();
    for (text, key) in [
        ("[scene]\nvideoz = 3\n", "scene.videoz"),
        ("[pipeline.sync.denoise_options]\nmax_iter = 10\nbogus = 1\n", "pipeline.sync.denoise_options.bogus"),
    ] {
        let cfg = dir.path().join("bad.toml");
        fs::write(&cfg, text).unwrap();
        let out = multicap(&["synth", "--config", path(&cfg), "--out", path(&dir.path().join("d"))]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains(key));
    }
}

#[test]
fn written_config_round_trips() {
    let dir = TempDir::new().unwrap();
    let (_, data) = synth(&dir, "[scene]\nvideos = 2\nbase_frames = 30\n\n[scene.desync]\nn_s1 = 8\nn_s2 = 2\n");
    let again = dir.path().join("again");
    ok(&["synth", "--config", path(&Path::new(&data).join("config.json")), "--out", path(&again)]);
    assert!(dir_bytes(Path::new(&data)) == dir_bytes(&again));
}

#[test]
fn dense_desync_runs_to_completion() {
    let dir = TempDir::new().unwrap();
    let (cfg, data) = synth(&dir, "[scene]\nvideos = 2\n\n[scene.desync]\nn_s1 = 150\nn_s2 = 50\n");
    let out = dir.path().join("out");
    ok(&["pipeline", &data, "--config", &cfg, "--out", path(&out)]);
    assert!(out.join("solution.json").exists());
}
