//! Tiny decoder-only transformers used as frozen graph nodes.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{InjectPositions, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::seed::normal_vec;
use crate::trainer::optim::{AdamW, SlotHyper};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default)]
    pub framing_prefix: Vec<usize>,
}

impl NodeSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("node {}: {m}", self.name)));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model));
        }
        if self.n_layers < 2 {
            return fail(format!("n_layers must be at least 2, got {}", self.n_layers));
        }
        if self.vocab_size == 0 || self.d_ff == 0 {
            return fail("vocab_size and d_ff must be positive".into());
        }
        if self.framing_prefix.len() >= self.max_seq {
            return fail(format!("prefix of {} leaves no room in max_seq {}", self.framing_prefix.len(), self.max_seq));
        }
        if let Some(&t) = self.framing_prefix.iter().find(|&&t| t >= self.vocab_size) {
            return fail(format!("prefix token {t} outside vocabulary of {}", self.vocab_size));
        }
        Ok(())
    }
}

/// `floor(l·L)` clamped to `[1, L]`: the residual stream after that
/// (1-based) block.
pub fn depth_to_layer(l: f64, n_layers: usize) -> Result<usize> {
    if !(l > 0.0 && l <= 1.0) || n_layers == 0 {
        return Err(Error::InvalidInput(format!(
            "relative depth must lie in (0, 1] with at least one layer, got {l} of {n_layers}"
        )));
    }
    // The small nudge keeps products like 0.7·10 from landing just below an integer.
    let k = (l * n_layers as f64 + 1e-9).floor() as usize;
    Ok(k.clamp(1, n_layers))
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_o: Tensor,
    b_o: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w_fc: Tensor,
    b_fc: Tensor,
    w_proj: Tensor,
    b_proj: Tensor,
}

impl Block {
    const NAMES: [&'static str; 12] = [
        "ln1.g", "ln1.b", "attn.qkv.w", "attn.qkv.b", "attn.out.w", "attn.out.b", "ln2.g", "ln2.b",
        "mlp.fc.w", "mlp.fc.b", "mlp.proj.w", "mlp.proj.b",
    ];

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o, &self.ln2_g,
            &self.ln2_b, &self.w_fc, &self.b_fc, &self.w_proj, &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

/// Where and how a single forward pass is intercepted.
///
/// A plan is moved into [`TransformerNode::forward_hooked`] and dropped there,
/// so no hook can outlive the pass it was built for.
#[derive(Debug, Default)]
pub struct HookPlan {
    pub extract_at: Option<usize>,
    pub inject_at: Option<usize>,
    pub inject_vector: Option<Var>,
    pub alpha: f64,
    pub inject_positions: Option<InjectPositions>,
}

impl HookPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extract(mut self, layer: usize) -> Self {
        self.extract_at = Some(layer);
        self
    }

    pub fn inject(mut self, layer: usize, z: Var, alpha: f64, positions: InjectPositions) -> Self {
        self.inject_at = Some(layer);
        self.inject_vector = Some(z);
        self.alpha = alpha;
        self.inject_positions = Some(positions);
        self
    }

    fn validate(&self, n_layers: usize) -> Result<()> {
        let in_range = |l: Option<usize>| l.is_none_or(|l| (1..=n_layers).contains(&l));
        if !in_range(self.extract_at) || !in_range(self.inject_at) {
            return Err(Error::InvalidInput(format!(
                "hook layers {:?}/{:?} outside 1..={n_layers}",
                self.inject_at, self.extract_at
            )));
        }
        if let (Some(i), Some(e)) = (self.inject_at, self.extract_at) {
            if i >= e {
                return Err(Error::InvalidInput(format!(
                    "injection layer {i} must precede extraction layer {e}"
                )));
            }
        }
        if self.inject_at.is_some() != self.inject_vector.is_some() {
            return Err(Error::InvalidInput("injection layer and vector must be set together".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidInput(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Result of a hooked pass.
#[derive(Clone, Copy, Debug)]
pub enum NodeOutput {
    /// Final-token residual state at the extraction layer, shape `[d_model]`.
    Hidden(Var),
    /// Next-token logits for every non-prefix position, shape `[T, vocab]`.
    Logits(Var),
}

impl NodeOutput {
    pub fn var(self) -> Var {
        match self {
            NodeOutput::Hidden(v) | NodeOutput::Logits(v) => v,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerNode {
    spec: NodeSpec,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
    frozen: bool,
}

struct Trunk {
    /// `[B·T, d]` residual after the last block run.
    x: Var,
    /// Residuals after selected blocks, keyed by 1-based block index.
    taps: Vec<(usize, Var)>,
}

/// Pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup: usize,
    /// Also apply the output head to residuals from `depth_to_layer(d, L)`
    /// up to block `L-1`, so mid-depth states stay linearly readable.
    pub aux_from_depth: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            lr: 3e-3,
            batch_size: 32,
            warmup: 100,
            aux_from_depth: Some(0.9),
            seed: 0,
        }
    }
}

impl TransformerNode {
    /// Builds a node with seeded normal(0, 0.02) weights, zero biases and
    /// unit layer-norm gains. The node starts trainable.
    pub fn build(spec: NodeSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (d, v, f) = (spec.d_model, spec.vocab_size, spec.d_ff);
        let mut normal = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), normal_vec(&mut rng, n, INIT_STD)).expect("shape matches")
        };
        let tok_emb = normal(&[v, d]);
        let pos_emb = normal(&[spec.max_seq, d]);
        let blocks = (0..spec.n_layers)
            .map(|_| Block {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: normal(&[3 * d, d]),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: normal(&[d, d]),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w_fc: normal(&[f, d]),
                b_fc: Tensor::zeros(&[f]),
                w_proj: normal(&[d, f]),
                b_proj: Tensor::zeros(&[d]),
            })
            .collect();
        let head_w = normal(&[v, d]);
        let mut node = TransformerNode {
            spec,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[v]),
            frozen: true,
        };
        node.set_frozen(false);
        Ok(node)
    }

    pub fn spec(&self) -> &NodeSpec {
        &self.spec
    }

    pub fn d_model(&self) -> usize {
        self.spec.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.spec.n_layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.set_frozen(true);
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for t in self.params_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    /// Parameter names in a stable order, for checkpoints.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.blocks.len() {
            names.extend(Block::NAMES.iter().map(|n| format!("blocks.{i}.{n}")));
        }
        names.extend(["ln_f.g", "ln_f.b", "head.w", "head.b"].map(String::from));
        names
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.param_names().into_iter().zip(self.params()).collect()
    }

    /// Overwrites parameters from `(name, tensor)` pairs; every parameter must
    /// be present with its exact shape.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let names = self.param_names();
        let mut params = self.params_mut();
        for (name, dst) in names.iter().zip(params.iter_mut()) {
            let (_, src) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::dim("load_params", dst.shape(), src.shape()));
            }
            dst.assign(src.data())?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Order-sensitive fingerprint of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut digest = crate::autodiff::CRC64.digest();
        for t in self.params() {
            digest.update(&t.checksum().to_le_bytes());
        }
        digest.finalize()
    }

    /// True when any parameter holds a gradient.
    pub fn has_any_grad(&self) -> bool {
        self.params().iter().any(|t| t.grad().is_some())
    }

    fn with_prefix(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        let mut seq = self.spec.framing_prefix.clone();
        seq.extend_from_slice(tokens);
        if seq.len() > self.spec.max_seq {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds max_seq {}",
                seq.len(),
                self.spec.max_seq
            )));
        }
        Ok(seq)
    }

    /// Runs embeddings and blocks `1..=stop` over equal-length sequences.
    fn trunk(
        &self,
        tape: &mut Tape,
        seqs: &[Vec<usize>],
        stop: usize,
        inject: Option<(usize, Var, f64, InjectPositions)>,
        taps: &[usize],
    ) -> Result<Trunk> {
        let (b, t) = (seqs.len(), seqs[0].len());
        if seqs.iter().any(|s| s.len() != t) {
            return Err(Error::InvalidInput("batched sequences must share a length".into()));
        }
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let pos: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok = tape.param(&self.tok_emb);
        let pe = tape.param(&self.pos_emb);
        let e = tape.embedding(tok, &ids)?;
        let p = tape.embedding(pe, &pos)?;
        let mut x = tape.add(e, p)?;
        let mut out_taps = Vec::new();
        for (i, blk) in self.blocks.iter().take(stop).enumerate() {
            let layer = i + 1;
            x = self.block(tape, blk, x, b, t)?;
            if let Some((at, z, alpha, mode)) = inject {
                if at == layer {
                    let rows: Vec<usize> = match mode {
                        InjectPositions::All => (0..b * t).collect(),
                        InjectPositions::Last => (0..b).map(|s| s * t + t - 1).collect(),
                    };
                    x = tape.inject(x, z, alpha, &rows)?;
                }
            }
            if taps.contains(&layer) {
                out_taps.push((layer, x));
            }
        }
        Ok(Trunk { x, taps: out_taps })
    }

    fn block(&self, tape: &mut Tape, blk: &Block, x: Var, b: usize, t: usize) -> Result<Var> {
        let g1 = tape.param(&blk.ln1_g);
        let b1 = tape.param(&blk.ln1_b);
        let a = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let wqkv = tape.param(&blk.w_qkv);
        let bqkv = tape.param(&blk.b_qkv);
        let qkv = tape.linear(a, wqkv, Some(bqkv))?;
        let att = tape.causal_attention(qkv, b, t, self.spec.n_heads)?;
        let wo = tape.param(&blk.w_o);
        let bo = tape.param(&blk.b_o);
        let att = tape.linear(att, wo, Some(bo))?;
        let x = tape.add(x, att)?;
        let g2 = tape.param(&blk.ln2_g);
        let b2 = tape.param(&blk.ln2_b);
        let m = tape.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
        let wf = tape.param(&blk.w_fc);
        let bf = tape.param(&blk.b_fc);
        let h = tape.linear(m, wf, Some(bf))?;
        let h = tape.gelu(h);
        let wp = tape.param(&blk.w_proj);
        let bp = tape.param(&blk.b_proj);
        let h = tape.linear(h, wp, Some(bp))?;
        tape.add(x, h)
    }

    /// Final norm and output head over selected rows of a residual.
    fn readout(&self, tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
        let sel = tape.select_rows(x, rows)?;
        let sel = if rows.len() == 1 {
            tape.reshape(sel, vec![1, self.spec.d_model])?
        } else {
            sel
        };
        let g = tape.param(&self.lnf_g);
        let b = tape.param(&self.lnf_b);
        let n = tape.layer_norm(sel, g, b, LAYER_NORM_EPS)?;
        let w = tape.param(&self.head_w);
        let hb = tape.param(&self.head_b);
        tape.linear(n, w, Some(hb))
    }

    /// One pass over `tokens` with the framing prefix prepended, applying
    /// and then discarding `plan`.
    ///
    /// With an extraction layer set, returns the final-token residual after
    /// that block (before the final norm). Otherwise returns next-token
    /// logits for the non-prefix positions.
    pub fn forward_hooked(&self, tape: &mut Tape, tokens: &[usize], plan: HookPlan) -> Result<NodeOutput> {
        plan.validate(self.spec.n_layers)?;
        let seq = self.with_prefix(tokens)?;
        let t = seq.len();
        let inject = match (plan.inject_at, plan.inject_vector) {
            (Some(at), Some(z)) => {
                if tape.shape(z) != [self.spec.d_model] {
                    return Err(Error::dim("inject", &[self.spec.d_model], tape.shape(z)));
                }
                Some((at, z, plan.alpha, plan.inject_positions.unwrap_or(InjectPositions::All)))
            }
            _ => None,
        };
        let stop = plan.extract_at.unwrap_or(self.spec.n_layers);
        let trunk = self.trunk(tape, &[seq], stop, inject, &[])?;
        match plan.extract_at {
            Some(_) => Ok(NodeOutput::Hidden(tape.select_rows(trunk.x, &[t - 1])?)),
            None => {
                let rows: Vec<usize> = (self.spec.framing_prefix.len()..t).collect();
                Ok(NodeOutput::Logits(self.readout(tape, trunk.x, &rows)?))
            }
        }
    }

    /// Final-token residuals after block `layer` for each sequence, computed
    /// without gradient tracking.
    pub fn hidden_states(&self, batch: &[Vec<usize>], layer: usize) -> Result<Vec<Vec<f64>>> {
        if !(1..=self.spec.n_layers).contains(&layer) {
            return Err(Error::InvalidInput(format!("layer {layer} outside 1..={}", self.spec.n_layers)));
        }
        self.grouped(batch, |tape, seqs| {
            let t = seqs[0].len();
            let trunk = self.trunk(tape, seqs, layer, None, &[])?;
            let rows: Vec<usize> = (0..seqs.len()).map(|s| s * t + t - 1).collect();
            let d = self.spec.d_model;
            Ok(tape.value(trunk.x).chunks(d).enumerate().filter(|(i, _)| rows.contains(i)).map(|(_, r)| r.to_vec()).collect())
        })
    }

    /// Next-token logits at the final position of each sequence.
    pub fn last_logits(&self, batch: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.grouped(batch, |tape, seqs| {
            let t = seqs[0].len();
            let trunk = self.trunk(tape, seqs, self.spec.n_layers, None, &[])?;
            let rows: Vec<usize> = (0..seqs.len()).map(|s| s * t + t - 1).collect();
            let logits = self.readout(tape, trunk.x, &rows)?;
            Ok(tape.value(logits).chunks(self.spec.vocab_size).map(<[f64]>::to_vec).collect())
        })
    }

    /// Runs `f` over runs of equal-length prefixed sequences, preserving order.
    fn grouped(
        &self,
        batch: &[Vec<usize>],
        f: impl Fn(&mut Tape, &[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(batch.len());
        let mut tape = Tape::new();
        let mut start = 0;
        while start < batch.len() {
            let len = batch[start].len();
            let mut end = start;
            while end < batch.len() && batch[end].len() == len && end - start < 64 {
                end += 1;
            }
            let seqs = batch[start..end].iter().map(|s| self.with_prefix(s)).collect::<Result<Vec<_>>>()?;
            tape.reset();
            out.extend(f(&mut tape, &seqs)?);
            start = end;
        }
        Ok(out)
    }

    /// Next-token loss on a batch: cross-entropy of every non-prefix position
    /// against the following token, plus the optional auxiliary readout of
    /// intermediate residuals.
    fn lm_loss(&self, tape: &mut Tape, batch: &[&Vec<usize>], aux_from: Option<usize>) -> Result<Var> {
        let p = self.spec.framing_prefix.len();
        let inputs: Vec<Vec<usize>> = batch
            .iter()
            .map(|s| self.with_prefix(&s[..s.len() - 1]))
            .collect::<Result<_>>()?;
        let t = inputs[0].len();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, s) in batch.iter().enumerate() {
            for j in 0..s.len() - 1 {
                rows.push(b * t + p + j);
                targets.push(s[j + 1]);
            }
        }
        let l = self.spec.n_layers;
        let taps: Vec<usize> = aux_from.map(|lo| (lo..l).collect()).unwrap_or_default();
        let trunk = self.trunk(tape, &inputs, l, None, &taps)?;
        let logits = self.readout(tape, trunk.x, &rows)?;
        let mut loss = tape.cross_entropy(logits, &targets)?;
        if !trunk.taps.is_empty() {
            let k = trunk.taps.len() as f64;
            for (_, tap) in &trunk.taps {
                let lg = self.readout(tape, *tap, &rows)?;
                let aux = tape.cross_entropy(lg, &targets)?;
                let aux = tape.scale(aux, 1.0 / k);
                loss = tape.add(loss, aux)?;
            }
        }
        Ok(loss)
    }

    /// Trains the node on next-token prediction over `corpus` and returns
    /// the per-step loss. Sequences are sampled with replacement; the
    /// learning rate warms up linearly and then follows a cosine decay.
    pub fn pretrain(&mut self, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::State(format!("node {} is frozen", self.spec.name)));
        }
        if cfg.steps == 0 {
            return Ok(Vec::new());
        }
        if corpus.is_empty() || corpus.iter().any(|s| s.len() < 2) {
            return Err(Error::InvalidInput("pretraining needs sequences of at least two tokens".into()));
        }
        let aux_from = cfg
            .aux_from_depth
            .map(|d| depth_to_layer(d, self.spec.n_layers))
            .transpose()?
            .filter(|&lo| lo < self.spec.n_layers);
        let sizes: Vec<usize> = self.params().iter().map(|t| t.len()).collect();
        let mut opt = AdamW::new(&sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let first = &corpus[rng.random_range(0..corpus.len())];
            let mut batch = vec![first];
            while batch.len() < cfg.batch_size {
                let s = &corpus[rng.random_range(0..corpus.len())];
                if s.len() == first.len() {
                    batch.push(s);
                }
            }
            tape.reset();
            let loss = self.lm_loss(&mut tape, &batch, aux_from)?;
            losses.push(tape.scalar(loss));
            let grads = tape.backward(loss)?;
            for t in self.params_mut() {
                t.clear_grad();
                grads.accumulate_into(t)?;
            }
            let warm = ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
            let lr = cfg.lr * warm * cos;
            let hyper = vec![SlotHyper { lr, weight_decay: 0.0 }; sizes.len()];
            let mut params = self.params_mut();
            opt.step(&mut params, &hyper)?;
            for t in params {
                t.clear_grad();
            }
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    pub(crate) fn spec(d: usize, layers: usize, heads: usize, seed: u64) -> NodeSpec {
        NodeSpec {
            name: format!("n{d}"),
            vocab_size: 16,
            d_model: d,
            n_layers: layers,
            n_heads: heads,
            d_ff: 2 * d,
            max_seq: 8,
            seed,
            framing_prefix: vec![14, 15],
        }
    }

    fn frozen(d: usize, layers: usize, seed: u64) -> TransformerNode {
        let mut n = TransformerNode::build(spec(d, layers, 2, seed)).unwrap();
        n.freeze();
        n
    }

    fn hidden(node: &TransformerNode, tokens: &[usize], plan: HookPlan, tape: &mut Tape) -> Vec<f64> {
        let out = node.forward_hooked(tape, tokens, plan).unwrap();
        tape.value(out.var()).to_vec()
    }

    #[test]
    fn depth_examples() {
        assert_eq!(depth_to_layer(0.75, 32).unwrap(), 24);
        assert_eq!(depth_to_layer(0.90, 28).unwrap(), 25);
        assert_eq!(depth_to_layer(0.75, 28).unwrap(), 21);
        for l in 1..10 {
            assert_eq!(depth_to_layer(1.0, l).unwrap(), l);
        }
        assert_eq!(depth_to_layer(0.01, 4).unwrap(), 1);
        assert!(matches!(depth_to_layer(0.0, 4), Err(Error::InvalidInput(_))));
        assert!(depth_to_layer(1.5, 4).is_err());
    }

    #[test]
    fn build_is_seeded() {
        let a = TransformerNode::build(spec(8, 2, 2, 1)).unwrap();
        let b = TransformerNode::build(spec(8, 2, 2, 1)).unwrap();
        let c = TransformerNode::build(spec(8, 2, 2, 2)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert!(!a.is_frozen());
        let mut bad = spec(32, 2, 5, 0);
        assert!(matches!(TransformerNode::build(bad.clone()), Err(Error::Config(_))));
        bad.n_heads = 4;
        bad.n_layers = 1;
        assert!(matches!(TransformerNode::build(bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_alpha_matches_plain_pass() {
        let node = frozen(8, 3, 4);
        let mut tape = Tape::new();
        let z = tape.constant(vec![8], vec![0.5; 8]).unwrap();
        let a = hidden(&node, &[1, 2, 3], HookPlan::new().extract(3).inject(1, z, 0.0, InjectPositions::All), &mut tape);
        let b = hidden(&node, &[1, 2, 3], HookPlan::new().extract(3), &mut tape);
        assert_eq!(a, b);
    }

    #[test]
    fn no_contamination_across_calls() {
        let node = frozen(8, 3, 4);
        let mut tape = Tape::new();
        let z = tape.constant(vec![8], vec![0.3; 8]).unwrap();
        let _ = hidden(&node, &[1, 2], HookPlan::new().extract(3).inject(2, z, 0.9, InjectPositions::All), &mut tape);
        let after = hidden(&node, &[1, 2], HookPlan::new(), &mut tape);
        let fresh = hidden(&frozen(8, 3, 4), &[1, 2], HookPlan::new(), &mut Tape::new());
        assert_eq!(after, fresh);
    }

    #[test]
    fn full_blend_preserves_norm() {
        let node = frozen(8, 3, 4);
        let seq: Vec<usize> = vec![14, 15, 5, 6];
        let mut u = vec![0.0; 8];
        u[3] = 1.0;
        let mut tape = Tape::new();
        let plain = node.trunk(&mut tape, &[seq.clone()], 1, None, &[]).unwrap();
        let norm = crate::autodiff::norm2(&tape.value(plain.x)[24..32]);
        let z = tape.constant(vec![8], u).unwrap();
        let hooked = node.trunk(&mut tape, &[seq], 1, Some((1, z, 1.0, InjectPositions::Last)), &[]).unwrap();
        let last = &tape.value(hooked.x)[24..32];
        assert_eq!(last[3], norm);
        assert!((crate::autodiff::norm2(last) - norm).abs() < 1e-15);
    }

    #[test]
    fn modes_agree_on_single_token() {
        let mut s = spec(8, 3, 2, 9);
        s.framing_prefix.clear();
        let mut node = TransformerNode::build(s).unwrap();
        node.freeze();
        let mut tape = Tape::new();
        let z = tape.constant(vec![8], vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.1, -0.4, 0.2]).unwrap();
        let a = hidden(&node, &[3], HookPlan::new().extract(3).inject(1, z, 0.25, InjectPositions::All), &mut tape);
        let b = hidden(&node, &[3], HookPlan::new().extract(3).inject(1, z, 0.25, InjectPositions::Last), &mut tape);
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_inject_width_is_rejected() {
        let node = frozen(8, 3, 1);
        let mut tape = Tape::new();
        let z = tape.constant(vec![6], vec![0.1; 6]).unwrap();
        let r = node.forward_hooked(&mut tape, &[1], HookPlan::new().extract(3).inject(1, z, 0.5, InjectPositions::All));
        assert!(matches!(r, Err(Error::Dimension { .. })));
        let r = node.forward_hooked(&mut tape, &[1], HookPlan::new().extract(1).inject(2, z, 0.5, InjectPositions::All));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradient_reaches_injected_vector_through_frozen_node() {
        let node = frozen(8, 3, 2);
        let before = node.checksum();
        let z = Tensor::vector((0..8).map(|i| (i as f64 * 0.7).sin()).collect()).trainable();
        let mut tape = Tape::new();
        let zv = tape.param(&z);
        let h = node
            .forward_hooked(&mut tape, &[1, 2, 3], HookPlan::new().extract(3).inject(2, zv, 0.25, InjectPositions::All))
            .unwrap()
            .var();
        let loss = tape.sum(h);
        let g = tape.backward(loss).unwrap();
        assert!(g.for_tensor(&z).unwrap().iter().any(|v| *v != 0.0));
        assert!(node.params().iter().all(|t| g.for_tensor(t).is_none()));
        assert!(!node.has_any_grad());
        assert_eq!(node.checksum(), before);
    }

    #[test]
    fn hooked_pass_matches_finite_differences() {
        let node = frozen(8, 3, 6);
        let z = Tensor::vector((0..8).map(|i| (i as f64 * 1.3).cos()).collect());
        let r = gradcheck::check(&[z], 20, 3, |tape, v| {
            let u = tape.l2_normalize(v[0])?;
            let h = node
                .forward_hooked(tape, &[4, 2, 7], HookPlan::new().extract(3).inject(1, u, 0.25, InjectPositions::All))?
                .var();
            let w: Vec<f64> = (0..8).map(|i| 1.0 + i as f64 * 0.1).collect();
            let c = tape.constant(vec![8], w)?;
            let m = tape.mul(h, c)?;
            Ok(tape.sum(m))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn batched_logits_match_single_pass() {
        let node = frozen(8, 2, 3);
        let seqs = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7]];
        let batched = node.last_logits(&seqs).unwrap();
        for (s, want) in seqs.iter().zip(&batched) {
            let mut tape = Tape::new();
            let out = node.forward_hooked(&mut tape, s, HookPlan::new()).unwrap().var();
            let v = tape.value(out);
            let last = &v[v.len() - 16..];
            for (a, b) in last.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let hs = node.hidden_states(&seqs, 1).unwrap();
        let mut tape = Tape::new();
        let h = hidden(&node, &seqs[1], HookPlan::new().extract(1), &mut tape);
        for (a, b) in h.iter().zip(&hs[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pretrain_zero_steps_is_noop() {
        let mut node = TransformerNode::build(spec(8, 2, 2, 1)).unwrap();
        let before = node.checksum();
        let cfg = PretrainConfig { steps: 0, ..PretrainConfig::default() };
        assert!(node.pretrain(&[vec![1, 2, 3]], &cfg).unwrap().is_empty());
        assert_eq!(node.checksum(), before);
        node.freeze();
        assert!(matches!(node.pretrain(&[vec![1, 2]], &cfg), Err(Error::State(_))));
    }

    #[test]
    fn pretrain_memorizes_a_single_sequence() {
        let mut node = TransformerNode::build(spec(16, 2, 2, 1)).unwrap();
        let cfg = PretrainConfig {
            steps: 200,
            lr: 3e-3,
            batch_size: 4,
            warmup: 10,
            aux_from_depth: None,
            seed: 5,
        };
        let losses = node.pretrain(&[vec![3, 9, 1, 12, 5]], &cfg).unwrap();
        assert!(losses[199] < 0.1 * losses[0], "{} vs {}", losses[199], losses[0]);
    }
}
