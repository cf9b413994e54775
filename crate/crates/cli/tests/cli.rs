use std::fs;
use std::path::Path;

use smix_cli::{run_cli, EXIT_CONFIG, EXIT_OK};
use smix_core::harness::{load_config_with, ConfigSource};
use smix_core::trainer::{load_checkpoint, MetricsLog};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_cli(std::iter::once("smix").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn list_presets_prints_all() {
    let (code, out, _) = run(&["list-presets"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.lines().count() >= 11);
    for name in [
        "mstep-smix",
        "mstep-qmix",
        "mstep-vdn",
        "mstep-vdnr",
        "mstep-iql",
        "mstep-iqlr",
        "lambda-sweep",
        "nstep-sweep",
        "buffer-sweep",
        "noabs-ablation",
        "theory-suite",
    ] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
}

#[test]
fn short_training_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "train",
        "--preset",
        "mstep-smix",
        "--seed",
        "1",
        "--set",
        "total_steps=1000",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(MetricsLog::HEADER));
    assert!(lines.count() >= 1);

    let ckpt = fs::read_to_string(dir.path().join("checkpoint.txt")).unwrap();
    let net = load_checkpoint(&ckpt).unwrap();
    assert!(!net.agent.is_empty() && !net.mixer.is_empty());

    let echo = dir.path().join("config.toml");
    let cfg = load_config_with(ConfigSource::File(&echo), &[]).unwrap();
    assert_eq!((cfg.seed, cfg.total_steps, cfg.lambda), (1, 1000, 0.8));
}

#[test]
fn config_echo_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "train",
        "--preset",
        "mstep-vdnr",
        "--seed",
        "4",
        "--set",
        "total_steps=600",
        "--set",
        "eval_interval=200",
        "--out",
        path(a.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let echo = a.path().join("config.toml");
    let (code, _, err) = run(&["train", "--config", path(&echo), "--out", path(b.path())]);
    assert_eq!(code, EXIT_OK, "{err}");
    for f in ["metrics.csv", "checkpoint.txt", "config.toml"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn sweeps_write_one_directory_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "train",
        "--preset",
        "buffer-sweep",
        "--set",
        "total_steps=300",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    for b in [4, 32, 1500] {
        let d = dir.path().join(format!("buffer-{b}"));
        assert!(d.join("metrics.csv").exists());
        let cfg = fs::read_to_string(d.join("config.toml")).unwrap();
        assert!(cfg.contains(&format!("buffer_capacity = {b}")));
    }
}

#[test]
fn unknown_preset_and_key_exit_2_naming_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["train", "--preset", "mstep-smx", "--out", path(dir.path())]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("mstep-smx"));

    let (code, _, err) = run(&[
        "train",
        "--preset",
        "mstep-smix",
        "--set",
        "lamda=0.5",
        "--set",
        "lambda=1.5",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("`lamda`"), "{err}");
    assert!(err.contains("lambda = 1.5"), "{err}");
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(run(&[]).0, EXIT_CONFIG);
    assert_eq!(run(&["train", "--preset", "mstep-smix"]).0, EXIT_CONFIG);
    assert_eq!(
        run(&["theory", "--suite", "no-such-suite", "--out", "x"]).0,
        EXIT_CONFIG
    );
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("list-presets"));
}

#[test]
fn update_gap_suite_holds_in_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["theory", "--suite", "update-gap", "--out", path(dir.path())]);
    assert_eq!(code, EXIT_OK, "{err}");
    let csv = fs::read_to_string(dir.path().join("update-gap.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("instance_id,eps_dist,lambda,gamma,lhs,rhs,holds"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn theory_preset_runs_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = run(&["train", "--preset", "theory-suite", "--out", path(dir.path())]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(out.matches(": pass").count(), 3, "{out}");
    for f in ["update-gap.csv", "policy-evaluation.csv", "greedy-decomposition.csv"] {
        assert!(dir.path().join(f).exists());
    }
}
