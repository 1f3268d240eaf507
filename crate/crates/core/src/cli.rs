//! Command-line surface. Every command reads a run configuration and works
//! inside one run directory:
//!
//! ```text
//! config.toml          resolved configuration
//! dataset.jsonl        questions with their split
//! nodes/               node checkpoints and nodes.json
//! pretrain_loss.csv    node,step,loss
//! metrics.csv          one row per optimizer step
//! state/               resumable training state
//! best.flg             best-validation graph parameters
//! summary.json         accuracies and margins
//! validation.json      two-node gradient validation
//! report/              routing, gradient norms and parameter tables
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::diagnostics::{self, ParamDims};
use crate::error::{Error, Result};
use crate::graph::FrozenGraph;
use crate::node::{NodeSpec, TransformerNode};
use crate::pipeline::{self, NodeReport, RunConfig, Task};
use crate::trainer::{self, optim::AdamW, Schedule, Snapshot, StepMetrics, TrainState};

#[derive(Parser, Debug)]
#[command(name = "frozen-graph", about = "Graphs of frozen transformers joined by trained projections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain, freeze and save every node.
    PretrainNodes(Common),
    /// Train projections and output node; writes metrics, checkpoint and summary.
    TrainGraph {
        #[command(flatten)]
        common: Common,
        /// State directory of an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        schedule: Option<Schedule>,
        /// Stop after this many optimizer steps, keeping resumable state.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Two-node gradient-flow validation with the reference column.
    ValidateGradients(Common),
    /// Evaluate a graph checkpoint on the test questions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Graph checkpoint; the run's best.flg by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Routing, gradient-norm and parameter tables from a finished run.
    Report(Common),
}

/// Resolved configuration and run directory.
pub struct Ctx {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Ctx {
    pub fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let dir = common
            .out
            .clone()
            .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
        fs::create_dir_all(&dir)?;
        Ok(Ctx { cfg, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_config(&self) -> Result<()> {
        fs::write(self.path("config.toml"), self.cfg.to_toml()?)?;
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Serialize, Deserialize)]
struct NodesManifest {
    specs: Vec<NodeSpec>,
    n_layer1: usize,
    reports: Vec<NodeReport>,
}

pub fn cmd_pretrain_nodes(ctx: &Ctx) -> Result<Vec<NodeReport>> {
    ctx.write_config()?;
    let task = pipeline::build_task(&ctx.cfg)?;
    task.data.write_jsonl(BufWriter::new(File::create(ctx.path("dataset.jsonl"))?))?;
    let nodes = pipeline::pretrain_nodes(&ctx.cfg, &task)?;
    let ndir = ctx.path("nodes");
    fs::create_dir_all(&ndir)?;
    let all: Vec<&TransformerNode> = nodes.layer1.iter().chain(&nodes.layer2).collect();
    for n in &all {
        let named: Vec<(String, Tensor)> = n.named_params().into_iter().map(|(k, t)| (k, t.clone())).collect();
        checkpoint::save(&ndir.join(format!("{}.flg", n.spec().name)), &named)?;
    }
    write_json(
        &ndir.join("nodes.json"),
        &NodesManifest {
            specs: all.iter().map(|n| n.spec().clone()).collect(),
            n_layer1: nodes.layer1.len(),
            reports: nodes.reports.clone(),
        },
    )?;
    let mut w = BufWriter::new(File::create(ctx.path("pretrain_loss.csv"))?);
    writeln!(w, "node,step,loss")?;
    for (n, losses) in all.iter().zip(&nodes.losses) {
        for (s, l) in losses.iter().enumerate() {
            writeln!(w, "{},{},{}", n.spec().name, s + 1, l)?;
        }
    }
    w.flush()?;
    Ok(nodes.reports)
}

/// Loads the frozen nodes written by `pretrain-nodes`, checking that they
/// match the configuration and their recorded checksums.
pub fn load_nodes(ctx: &Ctx, task: &Task) -> Result<(Vec<TransformerNode>, Vec<TransformerNode>)> {
    let ndir = ctx.path("nodes");
    let manifest: NodesManifest = read_json(&ndir.join("nodes.json"))?;
    let (s1, s2) = ctx.cfg.node_specs(&task.table)?;
    let expected: Vec<NodeSpec> = s1.iter().chain(&s2).cloned().collect();
    if manifest.specs != expected {
        return Err(Error::State(format!(
            "nodes in {} were pretrained under a different configuration; rerun pretrain-nodes",
            ndir.display()
        )));
    }
    let mut nodes = Vec::new();
    for (spec, rep) in expected.into_iter().zip(&manifest.reports) {
        let path = ndir.join(format!("{}.flg", spec.name));
        let named = checkpoint::load(&path)?;
        let mut node = TransformerNode::build(spec)?;
        node.load_params(&named)?;
        node.freeze();
        if node.checksum() != rep.checksum {
            return Err(Error::Checksum {
                stored: rep.checksum,
                computed: node.checksum(),
            });
        }
        nodes.push(node);
    }
    let l2 = nodes.split_off(s1.len());
    Ok((nodes, l2))
}

fn load_graph(ctx: &Ctx) -> Result<(Task, FrozenGraph)> {
    let task = pipeline::build_task(&ctx.cfg)?;
    let (l1, l2) = load_nodes(ctx, &task)?;
    let graph = pipeline::build_graph(&ctx.cfg, &task, l1, l2)?;
    Ok((task, graph))
}

/// Floats are stored as IEEE-754 bit patterns so resuming is exact.
#[derive(Serialize, Deserialize)]
struct StateMeta {
    next_step: usize,
    optimizer_step: u64,
    beta1: u64,
    beta2: u64,
    eps: u64,
    best: Option<BestMeta>,
    zero_runs: [usize; 5],
    warnings: Vec<String>,
    stopped: bool,
}

#[derive(Serialize, Deserialize)]
struct BestMeta {
    step: usize,
    val_acc: u64,
    val_loss: u64,
}

fn moments_to_tensors(m: &[Vec<f64>], prefix: &str) -> Vec<(String, Tensor)> {
    m.iter().enumerate().map(|(i, v)| (format!("{prefix}.{i}"), Tensor::vector(v.clone()))).collect()
}

fn save_state(dir: &Path, graph: &FrozenGraph, st: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params: Vec<(String, Tensor)> = graph.trainable_names().into_iter().zip(graph.trainable()).map(|(n, t)| (n, t.clone())).collect();
    checkpoint::save(&dir.join("trainable.flg"), &params)?;
    let mut moments = moments_to_tensors(&st.optimizer.m, "m");
    moments.extend(moments_to_tensors(&st.optimizer.v, "v"));
    checkpoint::save(&dir.join("optimizer.flg"), &moments)?;
    if let Some(b) = &st.best {
        checkpoint::save(&dir.join("best.flg"), &b.tensors)?;
    }
    let meta = StateMeta {
        next_step: st.next_step,
        optimizer_step: st.optimizer.step,
        beta1: st.optimizer.beta1.to_bits(),
        beta2: st.optimizer.beta2.to_bits(),
        eps: st.optimizer.eps.to_bits(),
        best: st.best.as_ref().map(|b| BestMeta {
            step: b.step,
            val_acc: b.val_acc.to_bits(),
            val_loss: b.val_loss.to_bits(),
        }),
        zero_runs: st.zero_runs,
        warnings: st.warnings.clone(),
        stopped: st.stopped,
    };
    write_json(&dir.join("state.json"), &meta)
}

fn load_state(dir: &Path, graph: &mut FrozenGraph) -> Result<TrainState> {
    let meta: StateMeta = read_json(&dir.join("state.json"))?;
    graph.load_trainable(&checkpoint::load(&dir.join("trainable.flg"))?)?;
    let n = graph.trainable().len();
    let moments = checkpoint::load(&dir.join("optimizer.flg"))?;
    if moments.len() != 2 * n {
        return Err(Error::Format(format!("optimizer state holds {} slots, graph has {n}", moments.len() / 2)));
    }
    let take = |r: std::ops::Range<usize>| moments[r].iter().map(|(_, t)| t.data().to_vec()).collect();
    let optimizer = AdamW {
        beta1: f64::from_bits(meta.beta1),
        beta2: f64::from_bits(meta.beta2),
        eps: f64::from_bits(meta.eps),
        step: meta.optimizer_step,
        m: take(0..n),
        v: take(n..2 * n),
    };
    let best = match meta.best {
        Some(b) => Some(Snapshot {
            step: b.step,
            val_acc: f64::from_bits(b.val_acc),
            val_loss: f64::from_bits(b.val_loss),
            tensors: checkpoint::load(&dir.join("best.flg"))?,
        }),
        None => None,
    };
    Ok(TrainState {
        next_step: meta.next_step,
        optimizer,
        best,
        zero_runs: meta.zero_runs,
        warnings: meta.warnings,
        stopped: meta.stopped,
    })
}

/// Keeps the header and the first `rows` data rows of a metrics file.
fn truncate_metrics(path: &Path, rows: usize) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::MissingFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let kept: Vec<String> = BufReader::new(f).lines().take(rows + 1).collect::<std::io::Result<_>>()?;
    if kept.len() != rows + 1 {
        return Err(Error::State(format!("{} has fewer than {rows} rows to resume from", path.display())));
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

#[derive(Debug)]
pub enum TrainResult {
    Finished(Box<pipeline::Summary>),
    Paused { steps: usize },
}

pub fn cmd_train_graph(
    ctx: &mut Ctx,
    resume: Option<&Path>,
    schedule: Option<Schedule>,
    stop_after: Option<usize>,
) -> Result<TrainResult> {
    if let Some(s) = schedule {
        ctx.cfg.train.schedule = s;
    }
    ctx.write_config()?;
    let (task, mut graph) = load_graph(ctx)?;
    let checksums: Vec<u64> = graph.nodes().map(TransformerNode::checksum).collect();
    let metrics_path = ctx.path("metrics.csv");
    let mut state = match resume {
        Some(dir) => {
            let st = load_state(dir, &mut graph)?;
            truncate_metrics(&metrics_path, st.next_step)?;
            st
        }
        None => {
            fs::write(&metrics_path, format!("{}\n", StepMetrics::CSV_HEADER))?;
            TrainState::fresh(&graph)
        }
    };
    let mut w = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
    let tc = ctx.cfg.train_config();
    let outcome = trainer::train_graph(&mut graph, &task.data, &tc, &mut state, stop_after, |m| {
        writeln!(w, "{}", m.csv_row())?;
        Ok(())
    })?;
    w.flush()?;
    drop(w);
    save_state(&ctx.path("state"), &graph, &state)?;
    let after: Vec<u64> = graph.nodes().map(TransformerNode::checksum).collect();
    if after != checksums || graph.nodes().any(TransformerNode::has_any_grad) {
        return Err(Error::State("a frozen node changed during training".into()));
    }
    let total = tc.steps_per_epoch(task.data.train.len()) * tc.epochs;
    if !state.stopped && state.next_step < total {
        return Ok(TrainResult::Paused { steps: state.next_step });
    }
    let best = outcome.best.as_ref().ok_or_else(|| Error::State("training never evaluated".into()))?;
    graph.load_trainable(&best.tensors)?;
    checkpoint::save(&ctx.path("best.flg"), &best.tensors)?;
    let base = pipeline::baselines(&ctx.cfg, &graph, &task.data)?;
    let full = read_metrics(&metrics_path)?;
    let outcome = trainer::TrainOutcome {
        metrics: full,
        ..outcome
    };
    let summary = pipeline::summarize(&ctx.cfg, &graph, &task.data.test, &outcome, &base)?;
    write_json(&ctx.path("summary.json"), &summary)?;
    Ok(TrainResult::Finished(Box::new(summary)))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(StepMetrics::CSV_HEADER) {
        return Err(Error::Format(format!("{} does not start with the metrics header", path.display())));
    }
    lines.map(StepMetrics::parse_csv_row).collect()
}

pub fn cmd_validate_gradients(ctx: &Ctx) -> Result<diagnostics::TwoNodeReport> {
    let (task, graph) = load_graph(ctx)?;
    let examples: Vec<_> = task.data.train.iter().chain(&task.data.val).chain(&task.data.test).cloned().collect();
    let cfg = ctx.cfg.validation_config();
    let nodes: Vec<&TransformerNode> = graph.layer1.iter().chain(&graph.layer2).collect();
    let [s, d] = cfg.flow_nodes;
    let [a, b] = cfg.alignment_nodes;
    let report = diagnostics::two_node_validation(nodes[s], nodes[d], (nodes[a], nodes[b]), &examples, &cfg)?;
    #[derive(Serialize)]
    struct Out<'a> {
        source: &'a str,
        destination: &'a str,
        alignment_nodes: [&'a str; 2],
        table: Vec<diagnostics::ValidationRow>,
        report: &'a diagnostics::TwoNodeReport,
    }
    write_json(
        &ctx.path("validation.json"),
        &Out {
            source: &nodes[s].spec().name,
            destination: &nodes[d].spec().name,
            alignment_nodes: [&nodes[a].spec().name, &nodes[b].spec().name],
            table: diagnostics::validation_rows(&report),
            report: &report,
        },
    )?;
    Ok(report)
}

pub fn format_validation_table(rows: &[diagnostics::ValidationRow]) -> String {
    let mut s = format!("{:<30} {:>14} {:>14}\n", "Metric", "This run", "Reference");
    for r in rows {
        s += &format!("{:<30} {:>14.6} {:>14.6}\n", r.metric, r.desk, r.reference);
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub mean_attention: Vec<f64>,
    pub n: usize,
}

pub fn cmd_eval(ctx: &Ctx, ckpt: Option<&Path>) -> Result<EvalOutput> {
    let (task, mut graph) = load_graph(ctx)?;
    let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("best.flg"));
    graph.load_trainable(&checkpoint::load(&path)?)?;
    let r = trainer::evaluate(&graph, &task.data.test)?;
    Ok(EvalOutput {
        accuracy: r.accuracy,
        mean_loss: r.mean_loss,
        mean_attention: r.mean_attention,
        n: task.data.test.len(),
    })
}

pub fn cmd_report(ctx: &Ctx) -> Result<diagnostics::RoutingReport> {
    let metrics = read_metrics(&ctx.path("metrics.csv"))?;
    let routing = diagnostics::routing_report(&metrics)?;
    let rdir = ctx.path("report");
    fs::create_dir_all(&rdir)?;
    let mut w = BufWriter::new(File::create(rdir.join("routing.csv"))?);
    writeln!(w, "step,attn_node4,attn_node5,grad_ratio_w4_w5")?;
    for r in &routing.rows {
        writeln!(w, "{},{},{},{}", r.step, r.attention[0], r.attention[1], r.grad_ratio)?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(rdir.join("grad_norms.csv"))?);
    writeln!(w, "step,gnorm_w1,gnorm_w2,gnorm_w3,gnorm_w4,gnorm_w5")?;
    for m in &metrics {
        let g = m.grad_norms;
        writeln!(w, "{},{},{},{},{},{}", m.step, g[0], g[1], g[2], g[3], g[4])?;
    }
    w.flush()?;
    let task = pipeline::build_task(&ctx.cfg)?;
    let tables = [
        ("full-scale", diagnostics::count_params(&ParamDims::full_scale())?),
        ("run", diagnostics::count_params(&ParamDims::from_config(&ctx.cfg.graph_config(&task.table)?))?),
    ];
    let mut w = BufWriter::new(File::create(rdir.join("params.csv"))?);
    writeln!(w, "dims,component,shape,params")?;
    for (label, t) in &tables {
        for r in &t.rows {
            writeln!(w, "{label},\"{}\",{},{}", r.component, r.shape, r.params)?;
        }
        writeln!(w, "{label},Total trainable,-,{}", t.total)?;
    }
    w.flush()?;
    let n = metrics.len() as f64;
    let mean_gn: Vec<f64> = (0..5).map(|i| metrics.iter().map(|m| m.grad_norms[i]).sum::<f64>() / n).collect();
    #[derive(Serialize)]
    struct Out<'a> {
        steps: usize,
        mean_grad_norms: Vec<f64>,
        mean_attention: [f64; 2],
        mean_grad_ratio_w4_w5: f64,
        early_grad_ratio: f64,
        late_grad_ratio: f64,
        dominant_node: usize,
        params: &'a [(&'a str, diagnostics::ParamTable)],
    }
    write_json(
        &rdir.join("report.json"),
        &Out {
            steps: metrics.len(),
            mean_grad_norms: mean_gn,
            mean_attention: routing.mean_attention,
            mean_grad_ratio_w4_w5: routing.mean_grad_ratio,
            early_grad_ratio: routing.early_grad_ratio,
            late_grad_ratio: routing.late_grad_ratio,
            dominant_node: routing.dominant_node,
            params: &tables,
        },
    )?;
    Ok(routing)
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::PretrainNodes(c) => {
            let ctx = Ctx::new(&c)?;
            for r in cmd_pretrain_nodes(&ctx)? {
                let abstain = r.abstain_rate.map_or(String::new(), |a| format!(" abstain={a:.3}"));
                println!("{} layer={} params={} loss={:.4} known_acc={:.3}{abstain}", r.name, r.layer, r.params, r.final_loss, r.known_acc);
            }
            println!("nodes written to {}", ctx.path("nodes").display());
            Ok(0)
        }
        Command::TrainGraph {
            common,
            resume,
            schedule,
            stop_after,
        } => {
            let mut ctx = Ctx::new(&common)?;
            match cmd_train_graph(&mut ctx, resume.as_deref(), schedule, stop_after)? {
                TrainResult::Finished(s) => {
                    println!("{}", serde_json::to_string_pretty(&s)?);
                    for w in &s.warnings {
                        eprintln!("warning: {w}");
                    }
                }
                TrainResult::Paused { steps } => {
                    println!("paused after {steps} steps; resume with --resume {}", ctx.path("state").display());
                }
            }
            Ok(0)
        }
        Command::ValidateGradients(c) => {
            let ctx = Ctx::new(&c)?;
            let r = cmd_validate_gradients(&ctx)?;
            print!("{}", format_validation_table(&diagnostics::validation_rows(&r)));
            println!("frozen gradient detected: {}", r.frozen_grad_detected);
            Ok(if r.grad_flow.ratio > 0.0 && !r.frozen_grad_detected { 0 } else { 1 })
        }
        Command::Eval { common, checkpoint } => {
            let ctx = Ctx::new(&common)?;
            println!("{}", serde_json::to_string_pretty(&cmd_eval(&ctx, checkpoint.as_deref())?)?);
            Ok(0)
        }
        Command::Report(c) => {
            let ctx = Ctx::new(&c)?;
            let r = cmd_report(&ctx)?;
            println!(
                "steps={} mean_attention=[{:.4}, {:.4}] dominant=node{} grad_ratio_w4_w5 mean={:.3} early={:.3} late={:.3}",
                r.rows.len(),
                r.mean_attention[0],
                r.mean_attention[1],
                r.dominant_node,
                r.mean_grad_ratio,
                r.early_grad_ratio,
                r.late_grad_ratio
            );
            println!("tables written to {}", ctx.path("report").display());
            Ok(0)
        }
    }
}
