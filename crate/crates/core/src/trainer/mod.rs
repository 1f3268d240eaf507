//! Optimization of projection edges and the output node.

pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::FrozenGraph;
use crate::node::{depth_to_layer, TransformerNode};
use crate::seed;
use crate::taskgen::{DatasetSplit, McqExample, N_CHOICES};
use optim::{clip_grad_norm, cosine_lr, warmup_constant_lr, AdamW, SlotHyper};

/// Steps of all-zero gradient on an edge before a dead-edge warning.
pub const DEAD_EDGE_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    WarmupConstant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "warmup-constant" => Ok(Schedule::WarmupConstant),
            _ => Err(Error::Config(format!("unknown schedule {s:?}; use cosine or warmup-constant"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_proj: f64,
    pub lr_out: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Upper bound on passes over the training split.
    pub epochs: usize,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    #[serde(default)]
    pub seed: u64,
    pub eval_every: usize,
    /// Early stopping never triggers before this many steps.
    pub min_steps: usize,
    /// Stop once validation accuracy has not improved for this many steps.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_proj: 1e-3,
            lr_out: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            batch_size: 8,
            epochs: 60,
            schedule: Schedule::WarmupConstant,
            warmup_steps: 25,
            seed: 0,
            eval_every: 25,
            min_steps: 500,
            patience: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_proj, self.lr_out, self.clip_norm];
        if positive.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.clip_norm <= 0.0 {
            return Err(Error::Config("learning rates must be non-negative and clip_norm positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, epochs and eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(step as u64, total as u64, base),
            Schedule::WarmupConstant => warmup_constant_lr(step as u64, self.warmup_steps as u64, base),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
    /// Frobenius norm of each edge weight gradient, before clipping.
    pub grad_norms: [f64; 5],
    /// Mean attention on each layer-2 node over the batch and heads.
    pub attention: [f64; 2],
    pub lr_proj: f64,
    pub lr_out: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,epoch,loss,val_acc,gnorm_w1,gnorm_w2,gnorm_w3,gnorm_w4,gnorm_w5,attn_node4,attn_node5,lr_proj,lr_out";

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.epoch.to_string(), self.loss.to_string()];
        cols.push(self.val_acc.map(|v| v.to_string()).unwrap_or_default());
        cols.extend(self.grad_norms.iter().map(f64::to_string));
        cols.extend(self.attention.iter().map(f64::to_string));
        cols.push(self.lr_proj.to_string());
        cols.push(self.lr_out.to_string());
        cols.join(",")
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("malformed metrics row {line:?}"));
        if cols.len() != 13 {
            return Err(bad());
        }
        let f = |i: usize| cols[i].parse::<f64>().map_err(|_| bad());
        let u = |i: usize| cols[i].parse::<usize>().map_err(|_| bad());
        Ok(StepMetrics {
            step: u(0)?,
            epoch: u(1)?,
            loss: f(2)?,
            val_acc: if cols[3].is_empty() { None } else { Some(f(3)?) },
            grad_norms: [f(4)?, f(5)?, f(6)?, f(7)?, f(8)?],
            attention: [f(9)?, f(10)?],
            lr_proj: f(11)?,
            lr_out: f(12)?,
        })
    }
}

/// Parameter values at one point in training.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub val_acc: f64,
    pub val_loss: f64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Snapshot {
    fn of(graph: &FrozenGraph, step: usize, val_acc: f64, val_loss: f64) -> Self {
        let tensors = graph
            .trainable_names()
            .into_iter()
            .zip(graph.trainable())
            .map(|(n, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                (n, t)
            })
            .collect();
        Snapshot {
            step,
            val_acc,
            val_loss,
            tensors,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub next_step: usize,
    pub optimizer: AdamW,
    pub best: Option<Snapshot>,
    pub zero_runs: [usize; 5],
    pub warnings: Vec<String>,
    pub stopped: bool,
}

impl TrainState {
    pub fn fresh(graph: &FrozenGraph) -> Self {
        let sizes: Vec<usize> = graph.trainable().iter().map(|t| t.len()).collect();
        TrainState {
            next_step: 0,
            optimizer: AdamW::new(&sizes),
            best: None,
            zero_runs: [0; 5],
            warnings: Vec::new(),
            stopped: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub mean_attention: Vec<f64>,
}

/// Accuracy, mean cross-entropy and mean layer-2 attention of the graph.
pub fn evaluate(graph: &FrozenGraph, examples: &[McqExample]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let mut tape = Tape::new();
    let (mut correct, mut loss) = (0usize, 0.0);
    let mut att = vec![0.0; 2];
    for e in examples {
        tape.reset();
        let out = graph.forward(&mut tape, &e.question)?;
        correct += usize::from(out.predicted() == e.answer);
        loss -= out.probs[e.answer].ln();
        att.iter_mut().zip(out.mean_attention()).for_each(|(a, w)| *a += w);
    }
    let n = examples.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
        mean_attention: att.into_iter().map(|a| a / n).collect(),
    })
}

/// Outcome of [`train_graph`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub best: Option<Snapshot>,
    pub warnings: Vec<String>,
    pub steps: usize,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, seed::TRAIN_ORDER + 1000 * epoch as u64)));
    idx
}

/// Trains edges and output node with AdamW on the mean cross-entropy of each
/// batch. Gradients of the examples in a batch are accumulated one at a
/// time. Returns after the epoch budget or once validation accuracy stalls.
///
/// `on_step` sees every metrics row as it is produced; `state` carries the
/// optimizer and bookkeeping, so a run can be split across calls.
pub fn train_graph(
    graph: &mut FrozenGraph,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    state: &mut TrainState,
    max_new_steps: Option<usize>,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidInput("training needs train and validation examples".into()));
    }
    if graph.nodes().any(|n| !n.is_frozen()) {
        return Err(Error::State("all nodes must be frozen before graph training".into()));
    }
    let spe = cfg.steps_per_epoch(data.train.len());
    let total = spe * cfg.epochs;
    let n_edge = graph.n_edge_tensors();
    let ranks: Vec<usize> = graph.trainable().iter().map(|t| t.shape().len()).collect();
    let mut metrics = Vec::new();
    let mut tape = Tape::new();
    let end = max_new_steps.map_or(total, |m| (state.next_step + m).min(total));
    let mut step = state.next_step;
    while step < end && !state.stopped {
        let epoch = step / spe;
        let order = epoch_order(cfg.seed, epoch, data.train.len());
        let pos = step % spe;
        let batch: Vec<&McqExample> = order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(order.len())]
            .iter()
            .map(|&i| &data.train[i])
            .collect();

        graph.zero_grads();
        let inv = 1.0 / batch.len() as f64;
        let mut loss_sum = 0.0;
        let mut att = [0.0; 2];
        for e in &batch {
            tape.reset();
            let out = graph.forward(&mut tape, &e.question)?;
            let loss = tape.cross_entropy(out.logits, &[e.answer])?;
            loss_sum += tape.scalar(loss);
            let scaled = tape.scale(loss, inv);
            let grads = tape.backward(scaled)?;
            graph.accumulate(&grads)?;
            for (a, w) in att.iter_mut().zip(out.mean_attention()) {
                *a += w * inv;
            }
        }
        if graph.nodes().any(|n| n.has_any_grad()) {
            return Err(Error::State(format!("a frozen node received gradient at step {}", step + 1)));
        }
        let gn = graph.edge_grad_norms();
        let grad_norms: [f64; 5] = gn.clone().try_into().map_err(|_| Error::State("graph must have five edges".into()))?;
        clip_grad_norm(&mut graph.trainable_mut(), cfg.clip_norm)?;
        let lr_proj = cfg.lr(cfg.lr_proj, step, total);
        let lr_out = cfg.lr(cfg.lr_out, step, total);
        let hyper: Vec<SlotHyper> = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| SlotHyper {
                lr: if i < n_edge { lr_proj } else { lr_out },
                weight_decay: if r >= 2 { cfg.weight_decay } else { 0.0 },
            })
            .collect();
        state.optimizer.step(&mut graph.trainable_mut(), &hyper)?;

        for (i, g) in grad_norms.iter().enumerate() {
            state.zero_runs[i] = if *g == 0.0 { state.zero_runs[i] + 1 } else { 0 };
            if state.zero_runs[i] == DEAD_EDGE_STEPS {
                state.warnings.push(format!(
                    "edge W{} has had zero gradient for {DEAD_EDGE_STEPS} consecutive steps (ending at step {step})",
                    i + 1
                ));
            }
        }

        let mut val_acc = None;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == total {
            let rep = evaluate(graph, &data.val)?;
            val_acc = Some(rep.accuracy);
            let better = match &state.best {
                None => true,
                Some(b) => rep.accuracy > b.val_acc || (rep.accuracy == b.val_acc && rep.mean_loss < b.val_loss),
            };
            if better {
                state.best = Some(Snapshot::of(graph, step + 1, rep.accuracy, rep.mean_loss));
            }
        }
        let row = StepMetrics {
            step: step + 1,
            epoch,
            loss: loss_sum * inv,
            val_acc,
            grad_norms,
            attention: att,
            lr_proj,
            lr_out,
        };
        on_step(&row)?;
        metrics.push(row);
        graph.zero_grads();
        step += 1;
        state.next_step = step;
        if let Some(b) = &state.best {
            if step >= cfg.min_steps && step - b.step >= cfg.patience {
                state.stopped = true;
            }
        }
    }
    Ok(TrainOutcome {
        metrics,
        best: state.best.clone(),
        warnings: state.warnings.clone(),
        steps: state.next_step,
    })
}

/// Greedy accuracy of a frozen node: the choice whose answer token gets the
/// highest next-token logit after the question.
pub fn single_node_accuracy(node: &TransformerNode, examples: &[McqExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let qs: Vec<Vec<usize>> = examples.iter().map(|e| e.question.clone()).collect();
    let logits = node.last_logits(&qs)?;
    let correct = examples
        .iter()
        .zip(&logits)
        .filter(|(e, l)| crate::taskgen::pick_choice(l, &e.choices) == e.answer)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            steps: 3000,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            eval_every: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub hidden: usize,
    pub params: usize,
    pub budget: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Parameters of a linear classifier on width `d`.
pub fn linear_head_params(d: usize) -> usize {
    N_CHOICES * d + N_CHOICES
}

/// Widest single-hidden-layer head within `budget`, or 0 (a linear head)
/// when the budget cannot buy an MLP larger than the linear head.
pub fn head_width(d: usize, budget: usize) -> Result<usize> {
    let linear = linear_head_params(d);
    if budget < linear {
        return Err(Error::Config(format!("budget {budget} is below the linear head size {linear}")));
    }
    let h = (budget - N_CHOICES) / (d + 1 + N_CHOICES);
    Ok(if mlp_params(d, h) <= linear { 0 } else { h })
}

fn mlp_params(d: usize, h: usize) -> usize {
    if h == 0 {
        linear_head_params(d)
    } else {
        d * h + h + N_CHOICES * h + N_CHOICES
    }
}

fn features(node: &TransformerNode, examples: &[McqExample], layer: usize) -> Result<Vec<Vec<f64>>> {
    let qs: Vec<Vec<usize>> = examples.iter().map(|e| e.question.clone()).collect();
    let mut hs = node.hidden_states(&qs, layer)?;
    for h in &mut hs {
        let n = crate::autodiff::norm2(h);
        if !(n > crate::autodiff::NORMALIZE_EPS) {
            return Err(Error::Degenerate("zero hidden state".into()));
        }
        h.iter_mut().for_each(|v| *v /= n);
    }
    Ok(hs)
}

struct Head {
    layers: Vec<Tensor>,
}

impl Head {
    fn new(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = |o: usize, i: usize| {
            let std = (1.0 / i as f64).sqrt();
            [
                Tensor::matrix(o, i, seed::normal_vec(rng, o * i, std)).expect("shape").trainable(),
                Tensor::zeros(&[o]).trainable(),
            ]
        };
        let layers = if hidden == 0 {
            lin(N_CHOICES, d).to_vec()
        } else {
            let mut v = lin(hidden, d).to_vec();
            v.extend(lin(N_CHOICES, hidden));
            v
        };
        Head { layers }
    }

    fn logits(&self, tape: &mut Tape, x: &[Vec<f64>]) -> Result<crate::autodiff::Var> {
        let d = x[0].len();
        let xv = tape.constant(vec![x.len(), d], x.concat())?;
        let vars: Vec<_> = self.layers.iter().map(|t| tape.param(t)).collect();
        let mut h = tape.linear(xv, vars[0], Some(vars[1]))?;
        if vars.len() == 4 {
            h = tape.gelu(h);
            h = tape.linear(h, vars[2], Some(vars[3]))?;
        }
        Ok(h)
    }

    fn accuracy(&self, x: &[Vec<f64>], ex: &[McqExample]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, x)?;
        let ok = tape
            .value(l)
            .chunks(N_CHOICES)
            .zip(ex)
            .filter(|(row, e)| {
                let best = (0..N_CHOICES).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                best == e.answer
            })
            .count();
        Ok(ok as f64 / ex.len() as f64)
    }
}

/// Trains a classifier on one frozen node's normalized hidden state at
/// `extract_depth`, sized to the largest width whose parameter count fits
/// `budget`. Test accuracy is read at the best validation checkpoint.
pub fn train_baseline_head(
    node: &TransformerNode,
    data: &DatasetSplit,
    budget: usize,
    extract_depth: f64,
    cfg: &HeadConfig,
) -> Result<HeadReport> {
    let d = node.d_model();
    let hidden = head_width(d, budget)?;
    let layer = depth_to_layer(extract_depth, node.n_layers())?;
    let (xtr, xva, xte) = (
        features(node, &data.train, layer)?,
        features(node, &data.val, layer)?,
        features(node, &data.test, layer)?,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = Head::new(d, hidden, &mut rng);
    let mut opt = AdamW::new(&head.layers.iter().map(Tensor::len).collect::<Vec<_>>());
    let hyper: Vec<SlotHyper> = head
        .layers
        .iter()
        .map(|t| SlotHyper {
            lr: cfg.lr,
            weight_decay: if t.shape().len() >= 2 { cfg.weight_decay } else { 0.0 },
        })
        .collect();
    let mut tape = Tape::new();
    let (mut best_val, mut best_test) = (-1.0, 0.0);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..xtr.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let xb: Vec<Vec<f64>> = idx.iter().map(|&i| xtr[i].clone()).collect();
        let yb: Vec<usize> = idx.iter().map(|&i| data.train[i].answer).collect();
        tape.reset();
        let logits = head.logits(&mut tape, &xb)?;
        let loss = tape.cross_entropy(logits, &yb)?;
        let grads = tape.backward(loss)?;
        for t in &mut head.layers {
            t.clear_grad();
            grads.accumulate_into(t)?;
        }
        let mut params: Vec<&mut Tensor> = head.layers.iter_mut().collect();
        opt.step(&mut params, &hyper)?;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let va = head.accuracy(&xva, &data.val)?;
            if va > best_val {
                best_val = va;
                best_test = head.accuracy(&xte, &data.test)?;
            }
        }
    }
    Ok(HeadReport {
        hidden,
        params: mlp_params(d, hidden),
        budget,
        val_acc: best_val.max(0.0),
        test_acc: best_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_width_examples() {
        assert_eq!(head_width(32, linear_head_params(32)).unwrap(), 0);
        assert!(matches!(head_width(32, 10), Err(Error::Config(_))));
        for budget in [500usize, 5508, 17_580_036] {
            let h = head_width(32, budget).unwrap();
            let p = mlp_params(32, h);
            assert!(p <= budget);
            assert!(budget - p < 32 + 5);
        }
    }

    #[test]
    fn csv_row_has_header_width() {
        let m = StepMetrics {
            step: 1,
            epoch: 0,
            loss: 1.25,
            val_acc: None,
            grad_norms: [0.1; 5],
            attention: [0.5, 0.5],
            lr_proj: 1e-3,
            lr_out: 1e-4,
        };
        let n = StepMetrics::CSV_HEADER.split(',').count();
        assert_eq!(n, 13);
        assert_eq!(m.csv_row().split(',').count(), n);
        assert_eq!(m.csv_row().split(',').nth(3), Some(""));
        assert_eq!(StepMetrics::parse_csv_row(&m.csv_row()).unwrap(), m);
        assert!(StepMetrics::parse_csv_row("1,2,3").is_err());
    }

    fn tiny_setup() -> (FrozenGraph, DatasetSplit) {
        let table = crate::taskgen::gen_fact_table(5, 4, 3).unwrap();
        let data = crate::taskgen::gen_mcq_dataset(&table, 25, crate::taskgen::ChoiceLayout::SlotOrdered, 3).unwrap();
        (crate::graph::tests::tiny_graph(11), data)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            lr_proj: 1e-2,
            lr_out: 1e-2,
            epochs: 6,
            warmup_steps: 3,
            eval_every: 5,
            min_steps: 1000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_lowers_loss_and_logs_every_step() {
        let (mut g, data) = tiny_setup();
        let cfg = quick_cfg();
        let mut st = TrainState::fresh(&g);
        let mut seen = 0;
        let out = train_graph(&mut g, &data, &cfg, &mut st, None, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.steps, cfg.epochs * cfg.steps_per_epoch(data.train.len()));
        assert_eq!(seen, out.metrics.len());
        let first: f64 = out.metrics[..3].iter().map(|m| m.loss).sum();
        let last: f64 = out.metrics[out.metrics.len() - 3..].iter().map(|m| m.loss).sum();
        assert!(last < first, "{first} -> {last}");
        assert!(out.best.is_some());
        assert!(out.metrics.iter().all(|m| m.grad_norms.iter().all(|g| g.is_finite())));
    }

    #[test]
    fn split_run_matches_uninterrupted_run() {
        let cfg = quick_cfg();
        let (mut a, data) = tiny_setup();
        let mut sa = TrainState::fresh(&a);
        let full = train_graph(&mut a, &data, &cfg, &mut sa, None, |_| Ok(())).unwrap();

        let (mut b, _) = tiny_setup();
        let mut sb = TrainState::fresh(&b);
        let head = train_graph(&mut b, &data, &cfg, &mut sb, Some(7), |_| Ok(())).unwrap();
        let tail = train_graph(&mut b, &data, &cfg, &mut sb, None, |_| Ok(())).unwrap();
        let joined: Vec<_> = head.metrics.into_iter().chain(tail.metrics).collect();
        assert_eq!(joined, full.metrics);
        for (x, y) in a.trainable().iter().zip(b.trainable()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn unfrozen_nodes_are_rejected() {
        let (mut g, data) = tiny_setup();
        g.layer1[0] = TransformerNode::build(g.layer1[0].spec().clone()).unwrap();
        let mut st = TrainState::fresh(&g);
        let err = train_graph(&mut g, &data, &quick_cfg(), &mut st, Some(1), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn schedules_parse() {
        assert_eq!("cosine".parse::<Schedule>().unwrap(), Schedule::Cosine);
        assert_eq!("warmup-constant".parse::<Schedule>().unwrap(), Schedule::WarmupConstant);
        assert!("linear".parse::<Schedule>().is_err());
    }
}
