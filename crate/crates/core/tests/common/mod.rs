#![allow(dead_code)]

use std::path::Path;

use frozen_graph::cli::{self, Common, Ctx, TrainResult};
use frozen_graph::pipeline::{NodeShape, RunConfig, Summary};

fn shape(d_model: usize, n_layers: usize, n_heads: usize) -> NodeShape {
    NodeShape {
        d_model,
        n_layers,
        n_heads,
    }
}

/// A few-second configuration with the default task and graph wiring.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.name = "small".into();
    c.seed = 3;
    c.nodes.layer1 = vec![shape(8, 2, 2), shape(6, 2, 2), shape(10, 2, 2)];
    c.nodes.layer2 = vec![shape(12, 5, 2), shape(8, 5, 2)];
    c.pretrain.steps = 40;
    c.pretrain.batch_size = 8;
    c.pretrain.warmup = 5;
    c.graph.d_shared = 4;
    c.graph.output_heads = 2;
    c.train.epochs = 2;
    c.train.eval_every = 10;
    c.train.min_steps = 20;
    c.train.patience = 100;
    c.baseline.head.steps = 30;
    c.baseline.head.eval_every = 10;
    c.validation.pairs = 60;
    c
}

pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml().unwrap()).unwrap();
}

pub fn common(config: &Path, out: &Path) -> Common {
    Common {
        config: Some(config.to_path_buf()),
        out: Some(out.to_path_buf()),
        seed: None,
    }
}

/// Pretrains and trains into `out`, returning the summary.
pub fn full_run(cfg: &RunConfig, out: &Path) -> Summary {
    std::fs::create_dir_all(out).unwrap();
    let cfg_path = out.join("input.toml");
    write_config(cfg, &cfg_path);
    let c = common(&cfg_path, out);
    cli::cmd_pretrain_nodes(&Ctx::new(&c).unwrap()).unwrap();
    match cli::cmd_train_graph(&mut Ctx::new(&c).unwrap(), None, None, None).unwrap() {
        TrainResult::Finished(s) => *s,
        TrainResult::Paused { steps } => panic!("run paused after {steps} steps"),
    }
}

/// CRC-64 of every checkpoint a run leaves behind, keyed by relative path.
pub fn checkpoint_sums(dir: &Path) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    for sub in ["", "nodes", "state"] {
        let d = dir.join(sub);
        if !d.is_dir() {
            continue;
        }
        let mut names: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            if p.extension().is_some_and(|e| e == "flg") {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, frozen_graph::checkpoint::file_checksum(&p).unwrap()));
            }
        }
    }
    out
}
