//! End-to-end checks of the command-line interface: artifact layout, exit
//! codes, and the overwrite guard.

use std::path::Path;
use std::process::{Command, Output};

use promptseg::config::ExperimentConfig;
use promptseg::pipeline::forgetting_config;
use promptseg::tuning::TuningStrategy;

const BIN: &str = env!("CARGO_BIN_EXE_promptseg");

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = forgetting_config(5);
    for &s in &TuningStrategy::ALL {
        let mut opt = cfg.optimizer_for(s);
        opt.epochs = 1;
        cfg.optimizers.insert(s.name().to_string(), opt);
    }
    let path = dir.join("config.json");
    ExperimentConfig::save(&cfg, &path).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
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

#[test]
fn generate_then_train_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out_dir = tmp.path().join("work");
    let out = out_dir.to_str().unwrap();

    let r = run(&["--config", cfg, "--out", out, "generate"]);
    assert_code(&r, 0);
    assert!(out_dir.join("data/manifest.json").is_file());
    assert!(out_dir.join("data/new3/spec.json").is_file());

    // second generate into a populated directory must refuse without --force
    let r = run(&["--config", cfg, "--out", out, "generate"]);
    assert_code(&r, 2);
    let r = run(&["--config", cfg, "--out", out, "generate", "--force"]);
    assert_code(&r, 0);

    let r = run(&["--config", cfg, "--out", out, "pretrain", "--center", "new3"]);
    assert_code(&r, 0);
    assert!(out_dir.join("pretrain/new3/model.ckpt").is_file());
    assert!(out_dir.join("pretrain/new3/train_log.jsonl").is_file());

    let r = run(&[
        "--config", cfg, "--out", out,
        "finetune", "--strategy", "shallow", "--center", "new3", "--fold", "0",
    ]);
    assert_code(&r, 0);
    let run_dir = out_dir.join("runs/shallow/new3/fold0");
    assert!(run_dir.join("report.json").is_file());
    assert!(run_dir.join("delta.ckpt").is_file());

    let r = run(&[
        "--config", cfg, "--out", out,
        "evaluate", "--center", "new3", "--strategy", "shallow", "--fold", "0",
    ]);
    assert_code(&r, 0);

    // compare without --run sees only one filled cell: missing data, exit 3
    let r = run(&["--config", cfg, "--out", out, "compare", "--center", "new3"]);
    assert_code(&r, 3);
    assert!(out_dir.join("compare/new3/matrix.csv").is_file());
}

#[test]
fn count_params_lists_every_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let r = run(&["--config", cfg.to_str().unwrap(), "count-params"]);
    assert_code(&r, 0);
    let text = String::from_utf8_lossy(&r.stdout);
    for s in ["none", "partial", "full", "shallow", "deep"] {
        assert!(text.contains(s), "missing {s} in:\n{text}");
    }
}

#[test]
fn gradcheck_passes_at_default_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let r = run(&["--config", cfg.to_str().unwrap(), "gradcheck"]);
    assert_code(&r, 0);
    assert!(String::from_utf8_lossy(&r.stdout).contains("max relative error"));
}

#[test]
fn missing_artifacts_exit_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("empty");
    // fine-tuning needs the pretrain checkpoint, which was never produced
    let r = run(&[
        "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "finetune", "--strategy", "deep", "--center", "new3", "--fold", "0",
    ]);
    assert_code(&r, 3);
}

#[test]
fn bad_config_path_exits_with_data_code() {
    let r = run(&["--config", "/nonexistent/cfg.json", "count-params"]);
    assert_code(&r, 3);
}

#[test]
fn unknown_strategy_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let r = run(&[
        "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(),
        "finetune", "--strategy", "bogus", "--center", "new3", "--fold", "0",
    ]);
    assert_code(&r, 2);
}
