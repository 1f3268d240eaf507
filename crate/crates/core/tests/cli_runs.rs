//! Whole-run behaviour through the command layer, on a small configuration.

mod common;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::Parser;
use frozen_graph::checkpoint;
use frozen_graph::cli::{self, Cli, Ctx, TrainResult};
use frozen_graph::pipeline::{self, RunConfig};
use frozen_graph::trainer::{self, StepMetrics, TrainState};
use frozen_graph::Error;

/// Nodes pretrained once under [`common::small_config`]; tests copy them
/// into their own run directories.
fn pretrained() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, p) = DIR.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("base");
        std::fs::create_dir_all(&dir).unwrap();
        common::write_config(&common::small_config(), &dir.join("input.toml"));
        cli::cmd_pretrain_nodes(&Ctx::new(&common::common(&dir.join("input.toml"), &dir)).unwrap()).unwrap();
        (tmp, dir)
    });
    p
}

/// A fresh run directory holding a copy of the pretrained nodes.
fn run_dir(cfg: &RunConfig) -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    std::fs::create_dir_all(dir.join("nodes")).unwrap();
    for e in std::fs::read_dir(pretrained().join("nodes")).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(&p, dir.join("nodes").join(p.file_name().unwrap())).unwrap();
    }
    common::write_config(cfg, &dir.join("input.toml"));
    (tmp, dir)
}

fn args(cmd: &str, dir: &Path, extra: &[&str]) -> Cli {
    let cfg = dir.join("input.toml");
    let mut v = vec!["frozen-graph", cmd, "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    v.extend_from_slice(extra);
    Cli::parse_from(v)
}

fn ctx(dir: &Path) -> Ctx {
    Ctx::new(&common::common(&dir.join("input.toml"), dir)).unwrap()
}

#[test]
fn commands_run_end_to_end() {
    let (_tmp, dir) = run_dir(&common::small_config());
    assert_eq!(cli::run(args("train-graph", &dir, &[])).unwrap(), 0);
    for f in ["config.toml", "metrics.csv", "best.flg", "summary.json", "state/state.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let code = cli::run(args("validate-gradients", &dir, &[])).unwrap();
    assert_eq!(code, 0);
    assert!(dir.join("validation.json").exists());
    assert_eq!(cli::run(args("report", &dir, &[])).unwrap(), 0);
    for f in ["routing.csv", "grad_norms.csv", "params.csv", "report.json"] {
        assert!(dir.join("report").join(f).exists(), "report/{f} missing");
    }
    assert_eq!(cli::run(args("eval", &dir, &[])).unwrap(), 0);
}

#[test]
fn saved_checkpoint_evaluates_like_the_summary() {
    let (_tmp, dir) = run_dir(&common::small_config());
    let TrainResult::Finished(summary) = cli::cmd_train_graph(&mut ctx(&dir), None, None, None).unwrap() else {
        panic!("run paused");
    };
    let eval = cli::cmd_eval(&ctx(&dir), None).unwrap();
    assert_eq!(eval.accuracy.to_bits(), summary.graph_acc.to_bits());
    assert_eq!(eval.n, summary.test_size);
}

#[test]
fn interrupted_training_resumes_exactly() {
    let cfg = common::small_config();
    let (_a, whole) = run_dir(&cfg);
    let (_b, split) = run_dir(&cfg);
    cli::cmd_train_graph(&mut ctx(&whole), None, None, None).unwrap();
    let paused = cli::cmd_train_graph(&mut ctx(&split), None, None, Some(7)).unwrap();
    assert!(matches!(paused, TrainResult::Paused { steps: 7 }));
    // A few extra rows past the saved state, as if the process died mid-write.
    let m = split.join("metrics.csv");
    let mut text = std::fs::read_to_string(&m).unwrap();
    text += "8,0,0.1,,1,1,1,1,1,0.5,0.5,0.001,0.0001\n";
    std::fs::write(&m, text).unwrap();
    let state = split.join("state");
    cli::cmd_train_graph(&mut ctx(&split), Some(&state), None, None).unwrap();
    assert_eq!(std::fs::read(whole.join("metrics.csv")).unwrap(), std::fs::read(split.join("metrics.csv")).unwrap());
    for f in ["best.flg", "state/trainable.flg", "state/optimizer.flg"] {
        assert_eq!(
            checkpoint::file_checksum(&whole.join(f)).unwrap(),
            checkpoint::file_checksum(&split.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(std::fs::read(whole.join("summary.json")).unwrap(), std::fs::read(split.join("summary.json")).unwrap());
}

#[test]
fn repeated_runs_are_identical() {
    let cfg = common::small_config();
    let tmp = tempfile::tempdir().unwrap();
    let a = common::full_run(&cfg, &tmp.path().join("a"));
    let b = common::full_run(&cfg, &tmp.path().join("b"));
    assert_eq!(a, b);
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(common::checkpoint_sums(&tmp.path().join("a")), common::checkpoint_sums(&tmp.path().join("b")));
    assert_eq!(
        std::fs::read(tmp.path().join("a/pretrain_loss.csv")).unwrap(),
        std::fs::read(tmp.path().join("b/pretrain_loss.csv")).unwrap()
    );
}

#[test]
fn a_different_seed_changes_the_run() {
    let cfg = common::small_config();
    let (_tmp, dir) = run_dir(&cfg);
    let mut other = cfg.clone();
    other.seed += 1;
    // Node specs carry seeds, so nodes pretrained under another seed are refused.
    common::write_config(&other, &dir.join("input.toml"));
    assert!(matches!(cli::cmd_train_graph(&mut ctx(&dir), None, None, None), Err(Error::State(_))));
}

#[test]
fn missing_node_checkpoint_is_reported() {
    let (_tmp, dir) = run_dir(&common::small_config());
    let gone = dir.join("nodes/node4.flg");
    std::fs::remove_file(&gone).unwrap();
    match cli::cmd_train_graph(&mut ctx(&dir), None, None, None) {
        Err(Error::MissingFile { path, .. }) => assert_eq!(path, gone),
        other => panic!("expected a missing-file error, got {other:?}"),
    }
    let err = cli::run(args("eval", &dir, &[])).unwrap_err().to_string();
    assert!(err.contains("node4.flg"), "{err}");
}

#[test]
fn corrupted_node_checkpoint_is_refused() {
    let (_tmp, dir) = run_dir(&common::small_config());
    let p = dir.join("nodes/node2.flg");
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(cli::cmd_train_graph(&mut ctx(&dir), None, None, None), Err(Error::Checksum { .. })));
}

#[test]
fn metrics_csv_has_one_row_per_step() {
    let (_tmp, dir) = run_dir(&common::small_config());
    let TrainResult::Finished(summary) = cli::cmd_train_graph(&mut ctx(&dir), None, None, None).unwrap() else {
        panic!("run paused");
    };
    let mut rdr = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header.join(","), StepMetrics::CSV_HEADER);
    assert_eq!(header.len(), 13);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), summary.steps);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 13);
        assert_eq!(r[0].parse::<usize>().unwrap(), i + 1);
        let a4: f64 = r[9].parse().unwrap();
        let a5: f64 = r[10].parse().unwrap();
        assert!((a4 + a5 - 1.0).abs() < 1e-9);
    }
    let evals = rows.iter().filter(|r| !r[3].is_empty()).count();
    let every = common::small_config().train.eval_every;
    assert_eq!(evals, summary.steps / every + usize::from(summary.steps % every != 0));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = common::small_config();
    cfg.train.lr_proj = 0.0;
    cfg.train.lr_out = 0.0;
    let (_tmp, dir) = run_dir(&cfg);
    let c = ctx(&dir);
    let task = pipeline::build_task(&c.cfg).unwrap();
    let (l1, l2) = cli::load_nodes(&c, &task).unwrap();
    let mut graph = pipeline::build_graph(&c.cfg, &task, l1, l2).unwrap();
    let before: Vec<u64> = graph.trainable().iter().map(|t| t.checksum()).collect();
    let mut st = TrainState::fresh(&graph);
    let out = trainer::train_graph(&mut graph, &task.data, &c.cfg.train_config(), &mut st, Some(15), |_| Ok(())).unwrap();
    assert_eq!(out.metrics.len(), 15);
    assert!(out.metrics.iter().all(|m| m.grad_norms.iter().all(|g| *g > 0.0)));
    let after: Vec<u64> = graph.trainable().iter().map(|t| t.checksum()).collect();
    assert_eq!(before, after);
}

#[test]
fn untrained_graph_is_near_chance() {
    let c = ctx(pretrained());
    let task = pipeline::build_task(&c.cfg).unwrap();
    let (l1, l2) = cli::load_nodes(&c, &task).unwrap();
    let graph = pipeline::build_graph(&c.cfg, &task, l1, l2).unwrap();
    let all: Vec<_> = task.data.train.iter().chain(&task.data.val).chain(&task.data.test).cloned().collect();
    let r = trainer::evaluate(&graph, &all).unwrap();
    assert!((r.mean_loss - 4f64.ln()).abs() < 0.25, "loss {}", r.mean_loss);
    assert!(r.accuracy < 0.45, "accuracy {}", r.accuracy);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    let text = common::small_config().to_toml().unwrap().replace("[train]\n", "[train]\nlearning_rate = 0.1\n");
    std::fs::write(&p, text).unwrap();
    let err = RunConfig::load(&p).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("learning_rate"), "{err}");
}
