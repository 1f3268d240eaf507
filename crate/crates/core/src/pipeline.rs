//! Whole runs: task, node pretraining, graph training and baselines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::InjectPositions;
use crate::diagnostics::TwoNodeConfig;
use crate::error::{Error, Result};
use crate::graph::{FrozenGraph, GraphConfig};
use crate::node::{NodeSpec, PretrainConfig, TransformerNode};
use crate::seed;
use crate::taskgen::{
    gen_abstaining_corpus, gen_fact_table, gen_mcq_dataset, gen_pretrain_corpus, topic_shards, ChoiceLayout,
    DatasetSplit, Fact, FactTable, McqExample,
};
use crate::trainer::{self, HeadConfig, HeadReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub n_keys: usize,
    pub n_answers: usize,
    pub layout: ChoiceLayout,
    /// Questions across all splits; at most the number of facts keeps every
    /// question distinct.
    pub n_examples: usize,
    pub segments: usize,
    pub shard_width: usize,
    pub shard_stride: usize,
    /// Layer-1 nodes learn to answer UNK outside their shard.
    pub abstain: bool,
    pub corpus_copies: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodesConfig {
    pub layer1: Vec<NodeShape>,
    pub layer2: Vec<NodeShape>,
    pub vocab_size: usize,
    pub ff_mult: usize,
    pub max_seq: usize,
    /// Layer-2 nodes are pretrained on an unrelated fact table.
    pub layer2_generic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub d_shared: usize,
    pub alpha: f64,
    pub extract_depth: f64,
    pub inject_depth: f64,
    pub inject_positions: InjectPositions,
    pub output_heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub enabled: bool,
    #[serde(flatten)]
    pub head: HeadConfig,
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub task: TaskConfig,
    pub nodes: NodesConfig,
    pub pretrain: PretrainConfig,
    pub graph: GraphSection,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub validation: TwoNodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let shape = |d_model, n_layers, n_heads| NodeShape {
            d_model,
            n_layers,
            n_heads,
        };
        RunConfig {
            name: "skill-split".into(),
            seed: 0,
            out_dir: None,
            task: TaskConfig {
                n_keys: 16,
                n_answers: 4,
                layout: ChoiceLayout::SlotOrdered,
                n_examples: 256,
                segments: 5,
                shard_width: 3,
                shard_stride: 2,
                abstain: true,
                corpus_copies: 1,
            },
            nodes: NodesConfig {
                layer1: vec![shape(32, 4, 4), shape(24, 3, 3), shape(48, 4, 4)],
                layer2: vec![shape(64, 5, 4), shape(96, 6, 4)],
                vocab_size: 64,
                ff_mult: 4,
                max_seq: 16,
                layer2_generic: true,
            },
            pretrain: PretrainConfig::default(),
            graph: GraphSection {
                d_shared: 16,
                alpha: 0.25,
                extract_depth: 0.90,
                inject_depth: 0.75,
                inject_positions: InjectPositions::All,
                output_heads: 4,
            },
            train: TrainConfig::default(),
            baseline: BaselineConfig {
                enabled: true,
                head: HeadConfig::default(),
            },
            validation: TwoNodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        if t.segments == 0 || t.shard_width == 0 || t.shard_width > t.segments || t.corpus_copies == 0 {
            return Err(Error::Config("task: segments, shard_width and corpus_copies must be positive, width <= segments".into()));
        }
        self.train.validate()?;
        let total = self.nodes.layer1.len() + self.nodes.layer2.len();
        let v = &self.validation;
        if v.flow_nodes.iter().chain(&v.alignment_nodes).any(|&i| i >= total) {
            return Err(Error::Config(format!("validation: node indices must be below {total}")));
        }
        if v.flow_nodes[0] == v.flow_nodes[1] || v.alignment_nodes[0] == v.alignment_nodes[1] {
            return Err(Error::Config("validation: a pair needs two different nodes".into()));
        }
        self.graph_config(&self.task_table()?)?.validate()
    }

    fn task_table(&self) -> Result<FactTable> {
        gen_fact_table(self.task.n_keys, self.task.n_answers, seed::derive(self.seed, seed::TASK_TABLE))
    }

    /// Node specs for both layers, seeded from the root seed.
    pub fn node_specs(&self, table: &FactTable) -> Result<(Vec<NodeSpec>, Vec<NodeSpec>)> {
        let n = &self.nodes;
        let total = n.layer1.len() + n.layer2.len();
        if n.vocab_size < table.min_vocab(total) {
            return Err(Error::Config(format!(
                "nodes.vocab_size {} is below the {} tokens the task needs",
                n.vocab_size,
                table.min_vocab(total)
            )));
        }
        let mk = |i: usize, s: &NodeShape| NodeSpec {
            name: format!("node{}", i + 1),
            vocab_size: n.vocab_size,
            d_model: s.d_model,
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            d_ff: n.ff_mult * s.d_model,
            max_seq: n.max_seq,
            seed: seed::derive(self.seed, seed::NODE_INIT + i as u64),
            framing_prefix: table.framing_prefix(i),
        };
        let l1 = n.layer1.iter().enumerate().map(|(i, s)| mk(i, s)).collect();
        let l2 = n.layer2.iter().enumerate().map(|(i, s)| mk(n.layer1.len() + i, s)).collect();
        Ok((l1, l2))
    }

    pub fn graph_config(&self, table: &FactTable) -> Result<GraphConfig> {
        let (layer1, layer2) = self.node_specs(table)?;
        let g = &self.graph;
        Ok(GraphConfig {
            layer1,
            layer2,
            d_shared: g.d_shared,
            alpha: g.alpha,
            extract_depth: g.extract_depth,
            inject_depth: g.inject_depth,
            inject_positions: g.inject_positions,
            output_heads: g.output_heads,
            n_classes: crate::taskgen::N_CHOICES,
        })
    }

    /// Training settings with the seed taken from the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, seed::TRAIN_ORDER),
            ..self.train.clone()
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            seed: seed::derive(self.seed, seed::BASELINE_HEAD),
            ..self.baseline.head.clone()
        }
    }

    pub fn validation_config(&self) -> TwoNodeConfig {
        TwoNodeConfig {
            seed: seed::derive(self.seed, seed::VALIDATION),
            ..self.validation.clone()
        }
    }
}

/// The fact table, question splits and pretraining shards of a run.
#[derive(Clone, Debug)]
pub struct Task {
    pub table: FactTable,
    /// Table the layer-2 nodes learn when they are pretrained generically.
    pub generic: FactTable,
    pub data: DatasetSplit,
    pub shards: Vec<Vec<Fact>>,
}

pub fn build_task(cfg: &RunConfig) -> Result<Task> {
    let t = &cfg.task;
    let table = cfg.task_table()?;
    let generic = gen_fact_table(t.n_keys, t.n_answers, seed::derive(cfg.seed, seed::GENERIC_TABLE))?;
    let mut data = gen_mcq_dataset(&table, t.n_examples, t.layout, seed::derive(cfg.seed, seed::TASK_SPLIT))?;
    let shards = topic_shards(&table, cfg.nodes.layer1.len(), t.segments, t.shard_width, t.shard_stride);
    data.shards = shards.clone();
    Ok(Task {
        table,
        generic,
        data,
        shards,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub name: String,
    pub layer: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub params: usize,
    pub final_loss: f64,
    /// Greedy next-token accuracy on the facts the node was taught.
    pub known_acc: f64,
    /// Share of untaught facts answered with UNK; layer-1 nodes only.
    pub abstain_rate: Option<f64>,
    pub checksum: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainedNodes {
    pub layer1: Vec<TransformerNode>,
    pub layer2: Vec<TransformerNode>,
    pub reports: Vec<NodeReport>,
    pub losses: Vec<Vec<f64>>,
}

fn next_token_acc(node: &TransformerNode, table: &FactTable, facts: &[Fact], target: impl Fn(Fact) -> usize) -> Result<f64> {
    if facts.is_empty() {
        return Ok(f64::NAN);
    }
    let qs: Vec<Vec<usize>> = facts.iter().map(|&f| table.question(f)).collect();
    let logits = node.last_logits(&qs)?;
    let hits = facts
        .iter()
        .zip(&logits)
        .filter(|(f, l)| {
            let best = (0..l.len()).fold(0, |b, i| if l[i] > l[b] { i } else { b });
            best == target(**f)
        })
        .count();
    Ok(hits as f64 / facts.len() as f64)
}

struct Job<'a> {
    spec: NodeSpec,
    layer: usize,
    corpus: Vec<Vec<usize>>,
    table: &'a FactTable,
    known: Vec<Fact>,
    unknown: Vec<Fact>,
    cfg: PretrainConfig,
}

fn run_job(job: Job<'_>) -> Result<(TransformerNode, NodeReport, Vec<f64>)> {
    let mut node = TransformerNode::build(job.spec)?;
    let losses = node.pretrain(&job.corpus, &job.cfg)?;
    node.freeze();
    let t = job.table;
    let known_acc = next_token_acc(&node, t, &job.known, |f| t.answer_token(t.answer(f)))?;
    let abstain_rate = if job.layer == 1 && !job.unknown.is_empty() {
        Some(next_token_acc(&node, t, &job.unknown, |_| t.unk())?)
    } else {
        None
    };
    let report = NodeReport {
        name: node.spec().name.clone(),
        layer: job.layer,
        d_model: node.d_model(),
        n_layers: node.n_layers(),
        params: node.param_count(),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        known_acc,
        abstain_rate,
        checksum: node.checksum(),
    };
    Ok((node, report, losses))
}

/// Builds, pretrains and freezes every node. Nodes train in parallel; each
/// draws only from its own seed streams.
pub fn pretrain_nodes(cfg: &RunConfig, task: &Task) -> Result<PretrainedNodes> {
    let (s1, s2) = cfg.node_specs(&task.table)?;
    let copies = cfg.task.corpus_copies;
    let all: Vec<Fact> = task.table.facts().collect();
    let mut jobs = Vec::new();
    for (i, spec) in s1.into_iter().enumerate() {
        let shard = &task.shards[i];
        let cseed = seed::derive(cfg.seed, seed::NODE_CORPUS + i as u64);
        let corpus = if cfg.task.abstain {
            gen_abstaining_corpus(&task.table, shard, copies, cseed)?
        } else {
            gen_pretrain_corpus(&task.table, shard, copies, cseed)?
        };
        let unknown = all.iter().filter(|f| !shard.contains(f)).copied().collect();
        jobs.push(Job {
            spec,
            layer: 1,
            corpus,
            table: &task.table,
            known: shard.clone(),
            unknown,
            cfg: PretrainConfig {
                seed: seed::derive(cfg.seed, seed::NODE_PRETRAIN + i as u64),
                ..cfg.pretrain.clone()
            },
        });
    }
    let n1 = jobs.len();
    let l2_table = if cfg.nodes.layer2_generic { &task.generic } else { &task.table };
    for (j, spec) in s2.into_iter().enumerate() {
        let i = n1 + j;
        let cseed = seed::derive(cfg.seed, seed::NODE_CORPUS + i as u64);
        jobs.push(Job {
            spec,
            layer: 2,
            corpus: gen_pretrain_corpus(l2_table, &all, copies, cseed)?,
            table: l2_table,
            known: all.clone(),
            unknown: Vec::new(),
            cfg: PretrainConfig {
                seed: seed::derive(cfg.seed, seed::NODE_PRETRAIN + i as u64),
                ..cfg.pretrain.clone()
            },
        });
    }
    let results: Vec<Result<_>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(move || run_job(j))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("pretraining thread panicked".into()))))
            .collect()
    });
    let mut out = PretrainedNodes {
        layer1: Vec::new(),
        layer2: Vec::new(),
        reports: Vec::new(),
        losses: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        let (node, report, losses) = r?;
        if i < n1 {
            out.layer1.push(node);
        } else {
            out.layer2.push(node);
        }
        out.reports.push(report);
        out.losses.push(losses);
    }
    Ok(out)
}

pub fn build_graph(cfg: &RunConfig, task: &Task, layer1: Vec<TransformerNode>, layer2: Vec<TransformerNode>) -> Result<FrozenGraph> {
    let gc = cfg.graph_config(&task.table)?;
    FrozenGraph::new(gc, layer1, layer2, &mut seed::stream(cfg.seed, seed::GRAPH_INIT))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Greedy test accuracy of each node, in graph order.
    pub single_acc: Vec<f64>,
    pub best_single_acc: f64,
    pub best_node: usize,
    pub head: Option<HeadReport>,
}

/// Single-node greedy accuracy on the test questions and, when enabled, a
/// head matched to the graph's trainable budget on the best node.
pub fn baselines(cfg: &RunConfig, graph: &FrozenGraph, data: &DatasetSplit) -> Result<Baselines> {
    let single_acc = graph
        .nodes()
        .map(|n| trainer::single_node_accuracy(n, &data.test))
        .collect::<Result<Vec<_>>>()?;
    let best_node = (0..single_acc.len()).fold(0, |b, i| if single_acc[i] > single_acc[b] { i } else { b });
    let head = if cfg.baseline.enabled {
        let node = graph.nodes().nth(best_node).expect("index in range");
        Some(trainer::train_baseline_head(
            node,
            data,
            graph.trainable_param_count(),
            cfg.graph.extract_depth,
            &cfg.head_config(),
        )?)
    } else {
        None
    };
    Ok(Baselines {
        best_single_acc: single_acc[best_node],
        single_acc,
        best_node,
        head,
    })
}

/// `P(X ≥ k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_pmf = |i: usize| {
        let ln_choose: f64 = (0..i).map(|j| ((n - j) as f64).ln() - ((j + 1) as f64).ln()).sum();
        ln_choose + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()
    };
    (k..=n).map(|i| ln_pmf(i).exp()).sum::<f64>().min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub graph_acc: f64,
    pub graph_val_acc: f64,
    pub best_single_acc: f64,
    pub best_single_node: String,
    pub head_acc: Option<f64>,
    /// Percentage points.
    pub margin_vs_single: f64,
    pub margin_vs_head: Option<f64>,
    pub chance_p_value: f64,
    pub test_size: usize,
    pub best_step: usize,
    pub steps: usize,
    pub trainable_params: usize,
    pub head_params: Option<usize>,
    pub single_acc: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn summarize(
    cfg: &RunConfig,
    graph: &FrozenGraph,
    test: &[McqExample],
    outcome: &trainer::TrainOutcome,
    base: &Baselines,
) -> Result<Summary> {
    let rep = trainer::evaluate(graph, test)?;
    let correct = (rep.accuracy * test.len() as f64).round() as usize;
    let names: Vec<String> = graph.nodes().map(|n| n.spec().name.clone()).collect();
    let head_acc = base.head.as_ref().map(|h| h.test_acc);
    Ok(Summary {
        name: cfg.name.clone(),
        graph_acc: rep.accuracy,
        graph_val_acc: outcome.best.as_ref().map_or(f64::NAN, |b| b.val_acc),
        best_single_acc: base.best_single_acc,
        best_single_node: names[base.best_node].clone(),
        head_acc,
        margin_vs_single: 100.0 * (rep.accuracy - base.best_single_acc),
        margin_vs_head: head_acc.map(|h| 100.0 * (rep.accuracy - h)),
        chance_p_value: binomial_upper_tail(correct, test.len(), 0.25),
        test_size: test.len(),
        best_step: outcome.best.as_ref().map_or(0, |b| b.step),
        steps: outcome.steps,
        trainable_params: graph.trainable_param_count(),
        head_params: base.head.as_ref().map(|h| h.params),
        single_acc: base.single_acc.clone(),
        warnings: outcome.warnings.clone(),
    })
}
