//! Alignment, gradient-flow and routing analysis, plus parameter accounting.

use nalgebra::{Cholesky, DMatrix, RowDVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{InjectPositions, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::node::{depth_to_layer, HookPlan, TransformerNode};
use crate::seed;
use crate::taskgen::{McqExample, N_CHOICES};
use crate::trainer::StepMetrics;

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Reference values from the original large-model experiment.
pub mod reference {
    pub const RIDGE_R2: f64 = 0.299;
    pub const PERMUTATION_R2: f64 = -0.243;
    pub const W_GRAD_MAX: f64 = 2.48e-1;
    pub const W_GRAD_MEAN: f64 = 1.81e-3;
    pub const GRAD_RATIO: f64 = 0.130;
    pub const SKIP_IMPROVEMENT: f64 = 1.00;
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput(format!("{what} rows must be non-empty and of equal width")));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn column_means(m: &DMatrix<f64>) -> RowDVector<f64> {
    m.row_mean()
}

/// A fitted ridge map `y ≈ x·weights + intercept`.
#[derive(Clone, Debug)]
pub struct RidgeFit {
    pub weights: DMatrix<f64>,
    pub intercept: Vec<f64>,
    pub lambda: f64,
    /// In-sample coefficient of determination.
    pub r2: f64,
}

impl RidgeFit {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weights.ncols())
            .map(|j| self.intercept[j] + x.iter().enumerate().map(|(i, v)| v * self.weights[(i, j)]).sum::<f64>())
            .collect()
    }
}

/// `1 - SS_res / SS_tot` pooled over every target entry.
pub fn r2_score(y: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<f64> {
    let ym = to_matrix(y, "target")?;
    let mean = column_means(&ym);
    let (mut res, mut tot) = (0.0, 0.0);
    for (i, (row, p)) in y.iter().zip(pred).enumerate() {
        if p.len() != row.len() {
            return Err(Error::dim("r2_score", &[row.len()], &[p.len()]));
        }
        for (j, v) in row.iter().enumerate() {
            res += (v - p[j]).powi(2);
            tot += (ym[(i, j)] - mean[j]).powi(2);
        }
    }
    if tot <= 0.0 {
        return Err(Error::Degenerate("targets have zero variance".into()));
    }
    Ok(1.0 - res / tot)
}

fn solve_ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 paired rows, got {} and {}", x.len(), y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be a non-negative number, got {lambda}")));
    }
    let mut xm = to_matrix(x, "source")?;
    let mut ym = to_matrix(y, "target")?;
    let (xbar, ybar) = (column_means(&xm), column_means(&ym));
    for mut r in xm.row_iter_mut() {
        r -= &xbar;
    }
    for mut r in ym.row_iter_mut() {
        r -= &ybar;
    }
    let d = xm.ncols();
    let gram = xm.transpose() * &xm + DMatrix::identity(d, d) * lambda;
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let singular = || Error::Numeric("ridge system is singular; use lambda > 0".into());
    let chol = Cholesky::new(gram).ok_or_else(singular)?;
    if chol.l_dirty().diagonal().iter().any(|l| l * l <= 1e-12 * scale) {
        return Err(singular());
    }
    let w = chol.solve(&(xm.transpose() * &ym));
    let b = &ybar - &xbar * &w;
    Ok((w, b.iter().copied().collect()))
}

/// Closed-form ridge regression on centered data; the intercept is not
/// penalized.
pub fn ridge_fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<RidgeFit> {
    let (weights, intercept) = solve_ridge(x, y, lambda)?;
    let mut fit = RidgeFit {
        weights,
        intercept,
        lambda,
        r2: 0.0,
    };
    let pred: Vec<Vec<f64>> = x.iter().map(|r| fit.predict(r)).collect();
    fit.r2 = r2_score(y, &pred)?;
    Ok(fit)
}

fn permuted(y: &[Vec<f64>], order: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut seen = vec![false; y.len()];
    if order.len() != y.len() || order.iter().any(|&i| i >= y.len() || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::InvalidInput("order must be a permutation of the rows".into()));
    }
    Ok(order.iter().map(|&i| y[i].clone()).collect())
}

pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, seed::PERMUTATION));
    order
}

/// In-sample ridge R² after reordering the target rows by `order`.
pub fn permutation_control_with(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64, order: &[usize]) -> Result<f64> {
    Ok(ridge_fit(x, &permuted(y, order)?, lambda)?.r2)
}

/// In-sample ridge R² after a seeded shuffle of the target rows.
pub fn permutation_control(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64, seed: u64) -> Result<f64> {
    permutation_control_with(x, y, lambda, &random_permutation(y.len(), seed))
}

/// R² of held-out predictions from `folds` contiguous folds, pooled over
/// all rows. Unlike the in-sample value it can go negative.
pub fn cross_validated_r2(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64, folds: usize) -> Result<f64> {
    if folds < 2 || folds > x.len() {
        return Err(Error::InvalidInput(format!("{folds} folds for {} rows", x.len())));
    }
    let n = x.len();
    let mut pred = vec![Vec::new(); n];
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        let pick = |v: &[Vec<f64>]| -> Vec<Vec<f64>> { v[..lo].iter().chain(&v[hi..]).cloned().collect() };
        let (w, b) = solve_ridge(&pick(x), &pick(y), lambda)?;
        let fit = RidgeFit {
            weights: w,
            intercept: b,
            lambda,
            r2: f64::NAN,
        };
        for i in lo..hi {
            pred[i] = fit.predict(&x[i]);
        }
    }
    r2_score(y, &pred)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Held-out R² of the paired fit.
    pub ridge_r2: f64,
    /// Held-out R² after shuffling the target rows.
    pub permutation_r2: f64,
    pub ridge_r2_in_sample: f64,
    pub permutation_r2_in_sample: f64,
    pub n_samples: usize,
    pub lambda: f64,
    pub folds: usize,
}

pub fn alignment(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64, folds: usize, seed: u64) -> Result<AlignmentReport> {
    let yp = permuted(y, &random_permutation(y.len(), seed))?;
    Ok(AlignmentReport {
        ridge_r2: cross_validated_r2(x, y, lambda, folds)?,
        permutation_r2: cross_validated_r2(x, &yp, lambda, folds)?,
        ridge_r2_in_sample: ridge_fit(x, y, lambda)?.r2,
        permutation_r2_in_sample: ridge_fit(x, &yp, lambda)?.r2,
        n_samples: x.len(),
        lambda,
        folds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoNodeConfig {
    pub alpha: f64,
    /// Depth at which the source is read and the destination is written.
    pub inject_depth: f64,
    pub extract_depth: f64,
    pub inject_positions: InjectPositions,
    pub init_std: f64,
    pub lambda: f64,
    pub folds: usize,
    pub pairs: usize,
    /// Source and destination for the gradient-flow check, as 0-based
    /// indices over layer-1 then layer-2 nodes.
    pub flow_nodes: [usize; 2],
    /// Node pair whose hidden states are regressed; they should share
    /// training shards.
    pub alignment_nodes: [usize; 2],
    #[serde(default)]
    pub seed: u64,
}

impl Default for TwoNodeConfig {
    fn default() -> Self {
        TwoNodeConfig {
            alpha: 0.25,
            inject_depth: 0.75,
            extract_depth: 0.90,
            inject_positions: InjectPositions::All,
            init_std: 0.01,
            lambda: DEFAULT_LAMBDA,
            folds: 5,
            pairs: 200,
            flow_nodes: [0, 3],
            alignment_nodes: [0, 2],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradFlowReport {
    pub w_grad_max: f64,
    pub w_grad_mean: f64,
    pub head_grad_max: f64,
    pub head_grad_mean: f64,
    pub w_grad_norm: f64,
    pub head_grad_norm: f64,
    /// `‖∇W‖_F / ‖∇H‖_F`.
    pub ratio: f64,
    /// Ratio with a skip path divided by the ratio without.
    pub skip_improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoNodeReport {
    pub grad_flow: GradFlowReport,
    pub alignment: AlignmentReport,
    pub frozen_grad_detected: bool,
    pub n_examples: usize,
}

struct FlowGrads {
    w: Vec<f64>,
    h: Vec<f64>,
    frozen_touched: bool,
}

fn two_node_grads(
    src: &TransformerNode,
    dst: &TransformerNode,
    examples: &[McqExample],
    cfg: &TwoNodeConfig,
    skip: bool,
) -> Result<FlowGrads> {
    if !src.is_frozen() || !dst.is_frozen() {
        return Err(Error::State("two-node validation needs frozen nodes".into()));
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput("two-node validation needs examples".into()));
    }
    let (ds, dd) = (src.d_model(), dst.d_model());
    let src_layer = depth_to_layer(cfg.inject_depth, src.n_layers())?;
    let inj = depth_to_layer(cfg.inject_depth, dst.n_layers())?;
    let ext = depth_to_layer(cfg.extract_depth, dst.n_layers())?;
    let mut rng = seed::stream(cfg.seed, seed::VALIDATION);
    let mut w = Tensor::matrix(dd, ds, seed::normal_vec(&mut rng, dd * ds, cfg.init_std))?.trainable();
    let mut h = Tensor::matrix(N_CHOICES, dd, seed::normal_vec(&mut rng, N_CHOICES * dd, cfg.init_std))?.trainable();
    let inv = 1.0 / examples.len() as f64;
    let mut tape = Tape::new();
    let mut frozen_touched = false;
    for e in examples {
        tape.reset();
        let (wv, hv) = (tape.param(&w), tape.param(&h));
        let hs = src.forward_hooked(&mut tape, &e.question, HookPlan::new().extract(src_layer))?.var();
        let hs = tape.l2_normalize(hs)?;
        let z = tape.linear(hs, wv, None)?;
        let plan = HookPlan::new().extract(ext).inject(inj, z, cfg.alpha, cfg.inject_positions);
        let mut feat = dst.forward_hooked(&mut tape, &e.question, plan)?.var();
        if skip {
            feat = tape.add(feat, z)?;
        }
        let logits = tape.linear(feat, hv, None)?;
        let loss = tape.cross_entropy(logits, &[e.answer])?;
        let loss = tape.scale(loss, inv);
        let grads = tape.backward(loss)?;
        frozen_touched |= src.named_params().iter().chain(&dst.named_params()).any(|(_, t)| grads.for_tensor(t).is_some());
        grads.accumulate_into(&mut w)?;
        grads.accumulate_into(&mut h)?;
    }
    frozen_touched |= src.has_any_grad() || dst.has_any_grad();
    let take = |t: &Tensor| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
    Ok(FlowGrads {
        w: take(&w),
        h: take(&h),
        frozen_touched,
    })
}

fn abs_max(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn abs_mean(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn grad_ratio(g: &FlowGrads) -> Result<f64> {
    let hn = crate::autodiff::norm2(&g.h);
    if !(hn > 0.0) {
        return Err(Error::Degenerate("output head received no gradient".into()));
    }
    Ok(crate::autodiff::norm2(&g.w) / hn)
}

/// Gradient-norm ratio with a skip path from `z` to the head input, divided
/// by the ratio without it. Both runs share initialization.
pub fn skip_ablation(src: &TransformerNode, dst: &TransformerNode, examples: &[McqExample], cfg: &TwoNodeConfig) -> Result<f64> {
    let with = grad_ratio(&two_node_grads(src, dst, examples, cfg, true)?)?;
    let without = grad_ratio(&two_node_grads(src, dst, examples, cfg, false)?)?;
    Ok(with / without)
}

/// Source node projected into a destination node through one trainable
/// matrix, read out by a linear head. Gradients are averaged over
/// `examples`; alignment uses the first `cfg.pairs` of them.
/// Held-out ridge alignment between two nodes' hidden states at the
/// injection depth, over the first `cfg.pairs` questions.
pub fn pair_alignment(
    a: &TransformerNode,
    b: &TransformerNode,
    examples: &[McqExample],
    cfg: &TwoNodeConfig,
) -> Result<AlignmentReport> {
    let pairs: Vec<Vec<usize>> = examples.iter().take(cfg.pairs).map(|e| e.question.clone()).collect();
    let x = a.hidden_states(&pairs, depth_to_layer(cfg.inject_depth, a.n_layers())?)?;
    let y = b.hidden_states(&pairs, depth_to_layer(cfg.inject_depth, b.n_layers())?)?;
    alignment(&x, &y, cfg.lambda, cfg.folds, cfg.seed)
}

/// Gradient flow from `src` into `dst`, plus the alignment of `align`.
pub fn two_node_validation(
    src: &TransformerNode,
    dst: &TransformerNode,
    align: (&TransformerNode, &TransformerNode),
    examples: &[McqExample],
    cfg: &TwoNodeConfig,
) -> Result<TwoNodeReport> {
    let g = two_node_grads(src, dst, examples, cfg, false)?;
    let ratio = grad_ratio(&g)?;
    let with = two_node_grads(src, dst, examples, cfg, true)?;
    let skip_improvement = grad_ratio(&with)? / ratio;
    let alignment = pair_alignment(align.0, align.1, examples, cfg)?;
    let report = TwoNodeReport {
        grad_flow: GradFlowReport {
            w_grad_max: abs_max(&g.w),
            w_grad_mean: abs_mean(&g.w),
            head_grad_max: abs_max(&g.h),
            head_grad_mean: abs_mean(&g.h),
            w_grad_norm: crate::autodiff::norm2(&g.w),
            head_grad_norm: crate::autodiff::norm2(&g.h),
            ratio,
            skip_improvement,
        },
        alignment,
        frozen_grad_detected: g.frozen_touched || with.frozen_touched,
        n_examples: examples.len(),
    };
    Ok(report)
}

/// One line of the gradient-validation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub metric: String,
    pub key: String,
    pub desk: f64,
    pub reference: f64,
}

pub fn validation_rows(r: &TwoNodeReport) -> Vec<ValidationRow> {
    let row = |metric: &str, key: &str, desk: f64, reference: f64| ValidationRow {
        metric: metric.into(),
        key: key.into(),
        desk,
        reference,
    };
    vec![
        row("Ridge projection R²", "ridge_r2", r.alignment.ridge_r2, reference::RIDGE_R2),
        row("Permutation control R²", "permutation_r2", r.alignment.permutation_r2, reference::PERMUTATION_R2),
        row("W gradient max", "w_grad_max", r.grad_flow.w_grad_max, reference::W_GRAD_MAX),
        row("W gradient mean", "w_grad_mean", r.grad_flow.w_grad_mean, reference::W_GRAD_MEAN),
        row("Grad norm ratio (W / head)", "grad_ratio", r.grad_flow.ratio, reference::GRAD_RATIO),
        row("Skip connection improvement", "skip_improvement", r.grad_flow.skip_improvement, reference::SKIP_IMPROVEMENT),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub step: usize,
    pub attention: [f64; 2],
    /// `‖∇W_4‖ / ‖∇W_5‖`; infinite when W_5 had no gradient.
    pub grad_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub rows: Vec<RoutingRow>,
    pub mean_attention: [f64; 2],
    pub mean_grad_ratio: f64,
    /// Mean ratio over the first and last tenth of the run.
    pub early_grad_ratio: f64,
    pub late_grad_ratio: f64,
    /// Layer-2 node with the larger mean attention, 4 or 5.
    pub dominant_node: usize,
    pub max_attention_sum_error: f64,
}

pub fn routing_report(log: &[StepMetrics]) -> Result<RoutingReport> {
    if log.is_empty() {
        return Err(Error::InvalidInput("routing report needs a non-empty metrics log".into()));
    }
    let rows: Vec<RoutingRow> = log
        .iter()
        .map(|m| RoutingRow {
            step: m.step,
            attention: m.attention,
            grad_ratio: m.grad_norms[3] / m.grad_norms[4],
        })
        .collect();
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&RoutingRow) -> f64, rs: &[RoutingRow]| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
    let tenth = rows.len().div_ceil(10);
    let mean_attention = [
        rows.iter().map(|r| r.attention[0]).sum::<f64>() / n,
        rows.iter().map(|r| r.attention[1]).sum::<f64>() / n,
    ];
    Ok(RoutingReport {
        mean_grad_ratio: mean(&|r| r.grad_ratio, &rows),
        early_grad_ratio: mean(&|r| r.grad_ratio, &rows[..tenth]),
        late_grad_ratio: mean(&|r| r.grad_ratio, &rows[rows.len() - tenth..]),
        dominant_node: if mean_attention[0] >= mean_attention[1] { 4 } else { 5 },
        max_attention_sum_error: rows.iter().map(|r| (r.attention[0] + r.attention[1] - 1.0).abs()).fold(0.0, f64::max),
        mean_attention,
        rows,
    })
}

/// Widths that fix the trainable parameter count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDims {
    pub d_shared: usize,
    /// Node widths in edge order.
    pub widths: Vec<usize>,
    pub labels: Vec<String>,
    pub n_classes: usize,
}

impl ParamDims {
    /// The five-model graph of the original experiment.
    pub fn full_scale() -> Self {
        ParamDims {
            d_shared: 1024,
            widths: vec![2048, 1536, 2304, 3072, 4096],
            labels: ["Llama-3.2-1B", "Qwen2.5-1.5B", "Gemma-2-2B", "Phi-3-mini", "Mistral-7B"]
                .map(String::from)
                .to_vec(),
            n_classes: 4,
        }
    }

    pub fn from_config(cfg: &GraphConfig) -> Self {
        let specs: Vec<_> = cfg.layer1.iter().chain(&cfg.layer2).collect();
        ParamDims {
            d_shared: cfg.d_shared,
            widths: specs.iter().map(|s| s.d_model).collect(),
            labels: specs.iter().map(|s| s.name.clone()).collect(),
            n_classes: cfg.n_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub component: String,
    pub shape: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

pub fn edge_params(d_shared: usize, d_src: usize) -> usize {
    d_shared * d_src + d_shared
}

/// Attention projections with biases, classifier, learned query and layer
/// norm gain and shift.
pub fn output_node_params(d_shared: usize, n_classes: usize) -> usize {
    4 * (d_shared * d_shared + d_shared) + (n_classes * d_shared + n_classes) + d_shared + 2 * d_shared
}

pub fn count_params(dims: &ParamDims) -> Result<ParamTable> {
    if dims.d_shared == 0 || dims.widths.is_empty() || dims.widths.contains(&0) || dims.n_classes == 0 {
        return Err(Error::Config("parameter dimensions must be positive".into()));
    }
    let mut rows: Vec<ParamRow> = dims
        .widths
        .iter()
        .enumerate()
        .map(|(i, &d)| ParamRow {
            component: match dims.labels.get(i) {
                Some(l) => format!("W_{} ({l} -> shared)", i + 1),
                None => format!("W_{}", i + 1),
            },
            shape: format!("{} x {d}", dims.d_shared),
            params: edge_params(dims.d_shared, d),
        })
        .collect();
    rows.push(ParamRow {
        component: "Output node (attn + classifier)".into(),
        shape: "-".into(),
        params: output_node_params(dims.d_shared, dims.n_classes),
    });
    let total = rows.iter().map(|r| r.params).sum();
    Ok(ParamTable { rows, total })
}
