//! Two-layer graph of frozen nodes joined by trainable projections.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, InjectPositions, MhaParams, MhaVars, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::node::{depth_to_layer, HookPlan, NodeSpec, TransformerNode};
use crate::seed::normal_vec;

pub const N_LAYER1: usize = 3;
pub const N_LAYER2: usize = 2;
pub const EDGE_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub layer1: Vec<NodeSpec>,
    pub layer2: Vec<NodeSpec>,
    pub d_shared: usize,
    pub alpha: f64,
    pub extract_depth: f64,
    pub inject_depth: f64,
    pub inject_positions: InjectPositions,
    pub output_heads: usize,
    pub n_classes: usize,
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layer1.len() != N_LAYER1 || self.layer2.len() != N_LAYER2 {
            return fail(format!(
                "graph needs {N_LAYER1} layer-1 and {N_LAYER2} layer-2 nodes, got {} and {}",
                self.layer1.len(),
                self.layer2.len()
            ));
        }
        for s in self.layer1.iter().chain(&self.layer2) {
            s.validate()?;
            if s.d_model == self.d_shared {
                return fail(format!("node {} width equals the shared width {}", s.name, self.d_shared));
            }
            if s.d_model < 2 {
                return fail(format!("node {} is too narrow to resample into", s.name));
            }
        }
        if !(0.0 < self.inject_depth && self.inject_depth < self.extract_depth && self.extract_depth <= 1.0) {
            return fail(format!(
                "need 0 < inject_depth < extract_depth <= 1, got {} and {}",
                self.inject_depth, self.extract_depth
            ));
        }
        for s in &self.layer2 {
            let (i, e) = (self.inject_layer(s)?, self.extract_layer(s)?);
            if i >= e {
                return fail(format!(
                    "node {}: {} layers put injection (block {i}) at or after extraction (block {e})",
                    s.name, s.n_layers
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.d_shared < 2 || self.output_heads == 0 || self.d_shared % self.output_heads != 0 {
            return fail(format!("{} heads must divide shared width {}", self.output_heads, self.d_shared));
        }
        if self.n_classes < 2 {
            return fail("need at least two classes".into());
        }
        Ok(())
    }

    pub fn extract_layer(&self, s: &NodeSpec) -> Result<usize> {
        depth_to_layer(self.extract_depth, s.n_layers)
    }

    pub fn inject_layer(&self, s: &NodeSpec) -> Result<usize> {
        depth_to_layer(self.inject_depth, s.n_layers)
    }
}

/// Trainable affine map from a node's width into the shared space.
#[derive(Clone, Debug)]
pub struct ProjectionEdge {
    pub weight: Tensor,
    pub bias: Tensor,
    pub source: usize,
}

impl ProjectionEdge {
    pub fn new(d_shared: usize, d_src: usize, source: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = normal_vec(rng, d_shared * d_src, EDGE_INIT_STD);
        ProjectionEdge {
            weight: Tensor::matrix(d_shared, d_src, w).expect("shape matches").trainable(),
            bias: Tensor::zeros(&[d_shared]).trainable(),
            source,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.param(&self.weight), tape.param(&self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct OutputNode {
    pub query: Tensor,
    pub mha: MhaParams,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub heads: usize,
}

pub struct OutputVars {
    query: Var,
    mha: MhaVars,
    ln_g: Var,
    ln_b: Var,
    cls_w: Var,
    cls_b: Var,
}

impl OutputVars {
    /// From variables in [`OutputNode::NAMES`] order.
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != OutputNode::NAMES.len() {
            return Err(Error::InvalidInput(format!("expected {} output variables, got {}", OutputNode::NAMES.len(), v.len())));
        }
        Ok(OutputVars {
            query: v[0],
            mha: MhaVars {
                wq: v[1],
                bq: v[2],
                wk: v[3],
                bk: v[4],
                wv: v[5],
                bv: v[6],
                wo: v[7],
                bo: v[8],
            },
            ln_g: v[9],
            ln_b: v[10],
            cls_w: v[11],
            cls_b: v[12],
        })
    }
}

impl OutputNode {
    pub fn new(d: usize, n_classes: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let mut mat = |rows: usize, cols: usize, s: f64| {
            Tensor::matrix(rows, cols, normal_vec(rng, rows * cols, s)).expect("shape matches").trainable()
        };
        let wq = mat(d, d, std);
        let wk = mat(d, d, std);
        let wv = mat(d, d, std);
        let wo = mat(d, d, std);
        let cls_w = mat(n_classes, d, std);
        let query = Tensor::vector(normal_vec(rng, d, 0.02)).trainable();
        let zeros = |n: usize| Tensor::zeros(&[n]).trainable();
        OutputNode {
            query,
            mha: MhaParams {
                wq,
                bq: zeros(d),
                wk,
                bk: zeros(d),
                wv,
                bv: zeros(d),
                wo,
                bo: zeros(d),
            },
            ln_g: Tensor::filled(&[d], 1.0).trainable(),
            ln_b: zeros(d),
            cls_w,
            cls_b: zeros(n_classes),
            heads,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> OutputVars {
        OutputVars {
            query: tape.param(&self.query),
            mha: self.mha.bind(tape),
            ln_g: tape.param(&self.ln_g),
            ln_b: tape.param(&self.ln_b),
            cls_w: tape.param(&self.cls_w),
            cls_b: tape.param(&self.cls_b),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.query];
        v.extend(self.mha.tensors());
        v.extend([&self.ln_g, &self.ln_b, &self.cls_w, &self.cls_b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.query];
        v.extend(self.mha.tensors_mut());
        v.extend([&mut self.ln_g, &mut self.ln_b, &mut self.cls_w, &mut self.cls_b]);
        v
    }

    pub const NAMES: [&'static str; 13] = [
        "query", "mha.wq", "mha.bq", "mha.wk", "mha.bk", "mha.wv", "mha.bv", "mha.wo", "mha.bo", "ln.g", "ln.b",
        "cls.w", "cls.b",
    ];

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Cross-attention of the learned query over `entries`, then layer norm
    /// and the classifier. Returns logits and per-head attention weights.
    pub fn forward(&self, tape: &mut Tape, v: &OutputVars, entries: &[Var]) -> Result<(Var, Vec<Vec<f64>>)> {
        let (o, att) = tape.multi_head_attention(v.query, entries, entries, &v.mha, self.heads)?;
        let o = tape.layer_norm(o, v.ln_g, v.ln_b, LAYER_NORM_EPS)?;
        let logits = tape.linear(o, v.cls_w, Some(v.cls_b))?;
        Ok((logits, att))
    }
}

/// Final-token states at the extraction depth, l2-normalized.
pub fn encode_layer1(tape: &mut Tape, cfg: &GraphConfig, nodes: &[TransformerNode], tokens: &[usize]) -> Result<Vec<Var>> {
    nodes
        .iter()
        .map(|n| {
            let at = cfg.extract_layer(n.spec())?;
            let h = n.forward_hooked(tape, tokens, HookPlan::new().extract(at))?.var();
            tape.l2_normalize(h)
        })
        .collect()
}

/// Mean of the affine projections of each state.
pub fn aggregate_shared(tape: &mut Tape, edges: &[(Var, Var)], hs: &[Var]) -> Result<Var> {
    if edges.len() != hs.len() || hs.is_empty() {
        return Err(Error::InvalidInput(format!("{} edges for {} states", edges.len(), hs.len())));
    }
    let projected = edges
        .iter()
        .zip(hs)
        .map(|(&(w, b), &h)| tape.linear(h, w, Some(b)))
        .collect::<Result<Vec<_>>>()?;
    tape.mean_of(&projected)
}

/// Resamples `z` to each layer-2 node's width, injects it at the injection
/// depth and returns the final-token states at the extraction depth.
pub fn inject_layer2(tape: &mut Tape, cfg: &GraphConfig, nodes: &[TransformerNode], z: Var, tokens: &[usize]) -> Result<Vec<Var>> {
    nodes
        .iter()
        .map(|n| {
            let zt = tape.resample_linear(z, n.d_model())?;
            let plan = HookPlan::new()
                .extract(cfg.extract_layer(n.spec())?)
                .inject(cfg.inject_layer(n.spec())?, zt, cfg.alpha, cfg.inject_positions);
            Ok(n.forward_hooked(tape, tokens, plan)?.var())
        })
        .collect()
}

pub fn project_layer2(tape: &mut Tape, edges: &[(Var, Var)], hs: &[Var]) -> Result<Vec<Var>> {
    edges.iter().zip(hs).map(|(&(w, b), &h)| tape.linear(h, w, Some(b))).collect()
}

/// Handles and values from one graph pass.
#[derive(Clone, Debug)]
pub struct GraphOutput {
    pub logits: Var,
    pub z1: Var,
    /// Class probabilities.
    pub probs: Vec<f64>,
    /// Per head, attention over the two layer-2 entries.
    pub attention: Vec<Vec<f64>>,
}

impl GraphOutput {
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Attention on each layer-2 entry, averaged over heads.
    pub fn mean_attention(&self) -> Vec<f64> {
        let n = self.attention.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for h in &self.attention {
            out.iter_mut().zip(h).for_each(|(o, w)| *o += w);
        }
        out.iter_mut().for_each(|o| *o /= self.attention.len() as f64);
        out
    }
}

#[derive(Clone, Debug)]
pub struct FrozenGraph {
    pub config: GraphConfig,
    pub layer1: Vec<TransformerNode>,
    pub layer2: Vec<TransformerNode>,
    pub edges: Vec<ProjectionEdge>,
    pub output: OutputNode,
}

impl FrozenGraph {
    /// Assembles a graph from frozen nodes with freshly initialized edges
    /// and output node.
    pub fn new(config: GraphConfig, layer1: Vec<TransformerNode>, layer2: Vec<TransformerNode>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        for (n, s) in layer1.iter().chain(&layer2).zip(config.layer1.iter().chain(&config.layer2)) {
            if !n.is_frozen() {
                return Err(Error::State(format!("node {} must be frozen before joining a graph", n.spec().name)));
            }
            if n.spec() != s {
                return Err(Error::Config(format!("node {} does not match its configured spec", s.name)));
            }
        }
        let edges = layer1
            .iter()
            .chain(&layer2)
            .enumerate()
            .map(|(i, n)| ProjectionEdge::new(config.d_shared, n.d_model(), i, rng))
            .collect();
        let output = OutputNode::new(config.d_shared, config.n_classes, config.output_heads, rng);
        Ok(FrozenGraph {
            config,
            layer1,
            layer2,
            edges,
            output,
        })
    }

    /// The full pass: encode, aggregate, inject, project, attend, classify.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<GraphOutput> {
        let edges: Vec<(Var, Var)> = self.edges.iter().map(|e| e.bind(tape)).collect();
        let ov = self.output.bind(tape);
        self.forward_bound(tape, tokens, &edges, &ov)
    }

    /// [`Self::forward`] with trainable parameters already on the tape, in
    /// the order of [`Self::trainable`].
    pub fn forward_bound(&self, tape: &mut Tape, tokens: &[usize], edges: &[(Var, Var)], ov: &OutputVars) -> Result<GraphOutput> {
        let hs = encode_layer1(tape, &self.config, &self.layer1, tokens)?;
        let z1 = aggregate_shared(tape, &edges[..N_LAYER1], &hs)?;
        let h2 = inject_layer2(tape, &self.config, &self.layer2, z1, tokens)?;
        let z2 = project_layer2(tape, &edges[N_LAYER1..], &h2)?;
        let (logits, attention) = self.output.forward(tape, ov, &z2)?;
        let probs = crate::autodiff::softmax(&Tensor::vector(tape.value(logits).to_vec()))?.data().to_vec();
        Ok(GraphOutput {
            logits,
            z1,
            probs,
            attention,
        })
    }

    /// Forward pass on a private tape, values only.
    pub fn predict(&self, tokens: &[usize]) -> Result<GraphOutput> {
        self.forward(&mut Tape::new(), tokens)
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.edges.iter().flat_map(|e| [&e.weight, &e.bias]).collect();
        v.extend(self.output.tensors());
        v
    }

    /// Edges first (weight, bias per edge), then the output node.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.edges.iter_mut().flat_map(|e| [&mut e.weight, &mut e.bias]).collect();
        v.extend(self.output.tensors_mut());
        v
    }

    /// Number of leading entries of [`Self::trainable`] that belong to edges.
    pub fn n_edge_tensors(&self) -> usize {
        2 * self.edges.len()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.edges.len())
            .flat_map(|i| [format!("edge.{}.w", i + 1), format!("edge.{}.b", i + 1)])
            .collect();
        v.extend(OutputNode::NAMES.iter().map(|n| format!("out.{n}")));
        v
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for t in self.trainable_mut() {
            grads.accumulate_into(t)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.trainable_mut() {
            t.clear_grad();
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TransformerNode> {
        self.layer1.iter().chain(&self.layer2)
    }

    /// Frobenius norm of each edge weight's accumulated gradient.
    pub fn edge_grad_norms(&self) -> Vec<f64> {
        self.edges.iter().map(|e| e.weight.grad_norm()).collect()
    }

    pub fn load_trainable(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let names = self.trainable_names();
        for (name, dst) in names.iter().zip(self.trainable_mut()) {
            let (_, src) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::dim("load_trainable", dst.shape(), src.shape()));
            }
            dst.assign(src.data())?;
        }
        Ok(())
    }
}
