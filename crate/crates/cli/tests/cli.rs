use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
eval_interval = 20
deterministic = true

[scene]
n_teacher = 20
n_cams = 3
width = 24
height = 24

[schedule]
densify_start = 10
densify_end = 40
densify_interval = 10
prune_interval_late = 20
total_iters = 60
recovery_iters = 10
grad_threshold = 4e-3
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_splatmask"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn verify_gradients_passes() {
    let dir = workspace();
    let stdout = ok(dir.path(), &["verify-gradients", "--rays", "50", "--out-dir", "v"]);
    assert_eq!(stdout.matches("PASS").count(), 4, "{stdout}");
    let log = fs::read_to_string(dir.path().join("v/verify.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn generate_scene_writes_targets() {
    let dir = workspace();
    ok(dir.path(), &["generate-scene", "--config", "tiny.toml", "--out-dir", "g"]);
    let g = dir.path().join("g");
    assert!(g.join("teacher.bin").exists());
    let cams = fs::read_to_string(g.join("cameras.txt")).unwrap();
    assert_eq!(cams.lines().filter(|l| !l.starts_with('#')).count(), 3, "{cams}");
    for k in 0..3 {
        assert!(g.join(format!("target_{k:02}.png")).exists());
        assert!(g.join(format!("target_{k:02}.f32")).exists());
    }
}

#[test]
fn deterministic_training_repeats_exactly() {
    let dir = workspace();
    for out in ["a", "b"] {
        ok(dir.path(), &["train", "--config", "tiny.toml", "--seed", "4", "--out-dir", out]);
    }
    let a = fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let cfg = fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
    assert!(cfg.contains("seed = 4"));

    // The trained scene renders, with and without sampled masks.
    let stdout = ok(
        dir.path(),
        &["render", "--config", "tiny.toml", "--scene", "a/scene.bin", "--camera", "2", "--out-dir", "r"],
    );
    assert!(stdout.contains("rendered camera 2"));
    assert!(dir.path().join("r/render.png").exists());
    assert!(dir.path().join("r/mask_proposed.f32").exists());
    ok(
        dir.path(),
        &["render", "--config", "tiny.toml", "--scene", "a/scene.bin", "--sample-masks", "--out-dir", "r"],
    );
}

#[test]
fn flags_override_the_config() {
    let dir = workspace();
    ok(
        dir.path(),
        &[
            "train", "--config", "tiny.toml", "--mask-mode", "global", "--lambda-m", "0.5", "--iters", "30",
            "--recovery-iters", "5", "--precision", "f64", "--out-dir", "o",
        ],
    );
    let cfg = fs::read_to_string(dir.path().join("o/config.toml")).unwrap();
    assert!(cfg.contains("mask_mode = \"global\""));
    assert!(cfg.contains("lambda_m = 0.5"));
    assert!(cfg.contains("lambda_f = 0.0"));
    assert!(cfg.contains("total_iters = 30"));
    assert!(cfg.contains("precision = \"f64\""));
}

#[test]
fn sweep_and_ablation_tables() {
    let dir = workspace();
    let stdout = ok(dir.path(), &["sweep", "--config", "tiny.toml", "--lambdas", "0,1e-3", "--out-dir", "s"]);
    assert_eq!(stdout.lines().count(), 3);
    let csv = fs::read_to_string(dir.path().join("s/gaussian_counts.csv")).unwrap();
    assert!(csv.starts_with("iteration,"));

    let stdout = ok(dir.path(), &["ablate", "--config", "tiny.toml", "--out-dir", "ab"]);
    for mode in ["proposed", "inverse", "cumulative"] {
        assert!(stdout.contains(mode), "{stdout}");
        assert!(dir.path().join(format!("ab/mask_{mode}.png")).exists());
    }
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = workspace();
    let out = run(dir.path(), &["train", "--config", "tiny.toml", "--mask-mode", "none", "--lambda-f", "1e-4"]);
    assert!(!out.status.success());
    let out = run(dir.path(), &["train", "--config", "missing.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
    fs::write(dir.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert!(!run(dir.path(), &["train", "--config", "bad.toml"]).status.success());
    let out = run(dir.path(), &["render", "--config", "tiny.toml"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--scene"));
}
