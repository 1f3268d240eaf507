//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Everything that needs a gradient is recorded on a [`Tape`]. The free
//! functions in this module are value-level conveniences built on a
//! throwaway tape, so they share code paths with the differentiable ops.

mod kernels;
mod tape;
mod tensor;

pub mod gradcheck;

pub use tape::{Gradients, InjectPositions, Tape, Var};
pub use tensor::{Tensor, TensorId};

pub(crate) use kernels::norm2;
pub(crate) use tensor::CRC64;

use crate::error::{Error, Result};

/// Smallest norm `l2_normalize` accepts.
pub const NORMALIZE_EPS: f64 = 1e-12;
/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projection weights of one multi-head attention block, already bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Projection weights of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl MhaParams {
    pub fn bind(&self, tape: &mut Tape) -> MhaVars {
        MhaVars {
            wq: tape.param(&self.wq),
            bq: tape.param(&self.bq),
            wk: tape.param(&self.wk),
            bk: tape.param(&self.bk),
            wv: tape.param(&self.wv),
            bv: tape.param(&self.bv),
            wo: tape.param(&self.wo),
            bo: tape.param(&self.bo),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }
}

impl Tape {
    /// Scaled dot-product attention of a single query over a short list of
    /// key/value vectors. Returns the output vector and, per head, the
    /// attention weights over the list.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        keys: &[Var],
        values: &[Var],
        p: &MhaVars,
        heads: usize,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "attention needs matching non-empty key/value lists, got {} and {}",
                keys.len(),
                values.len()
            )));
        }
        let d = self.shape(q).first().copied().unwrap_or(0);
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidInput(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let qp = self.linear(q, p.wq, Some(p.bq))?;
        let qp = self.reshape(qp, vec![1, d])?;
        let k = self.stack_rows(keys)?;
        let v = self.stack_rows(values)?;
        let kp = self.linear(k, p.wk, Some(p.bk))?;
        let vp = self.linear(v, p.wv, Some(p.bv))?;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(qp, h * dh, dh)?;
            let kh = self.slice_cols(kp, h * dh, dh)?;
            let vh = self.slice_cols(vp, h * dh, dh)?;
            let scores = self.linear(qh, kh, None)?;
            let scores = self.scale(scores, inv);
            let att = self.softmax(scores)?;
            weights.push(self.value(att).to_vec());
            outs.push(self.matmul(att, vh)?);
        }
        let cat = self.concat_cols(&outs)?;
        let cat = self.reshape(cat, vec![d])?;
        let out = self.linear(cat, p.wo, Some(p.bo))?;
        Ok((out, weights))
    }
}

fn unary(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.param(x);
    let out = f(&mut tape, v)?;
    Tensor::new(tape.shape(out).to_vec(), tape.value(out).to_vec())
}

/// `W x + b`.
pub fn affine(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (wv, bv, xv) = (tape.param(w), tape.param(b), tape.param(x));
    if x.shape().len() != 1 {
        return Err(Error::dim("affine", w.shape(), x.shape()));
    }
    let out = tape.linear(xv, wv, Some(bv))?;
    Tensor::new(tape.shape(out).to_vec(), tape.value(out).to_vec())
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| t.l2_normalize(v))
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| t.softmax(v))
}

pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, s, b) = (tape.param(x), tape.param(scale), tape.param(shift));
    let out = tape.layer_norm(xv, s, b, eps)?;
    Tensor::new(tape.shape(out).to_vec(), tape.value(out).to_vec())
}

pub fn resample_linear(x: &Tensor, n: usize) -> Result<Tensor> {
    unary(x, |t, v| t.resample_linear(v, n))
}

/// `-ln ŷ[c]` for a probability vector. Training code differentiates the
/// fused logit form [`Tape::cross_entropy`] instead.
pub fn cross_entropy(probs: &Tensor, c: usize) -> Result<f64> {
    let p = probs.data();
    if c >= p.len() {
        return Err(Error::Index { index: c, len: p.len() });
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric("cross_entropy expects a probability vector".into()));
    }
    Ok(-p[c].ln())
}

/// Value-level attention; see [`Tape::multi_head_attention`].
pub fn multi_head_attention(
    q: &Tensor,
    keys: &[Tensor],
    values: &[Tensor],
    params: &MhaParams,
    heads: usize,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let qv = tape.param(q);
    let ks: Vec<Var> = keys.iter().map(|k| tape.param(k)).collect();
    let vs: Vec<Var> = values.iter().map(|v| tape.param(v)).collect();
    let p = params.bind(&mut tape);
    let (out, w) = tape.multi_head_attention(qv, &ks, &vs, &p, heads)?;
    Ok((Tensor::new(tape.shape(out).to_vec(), tape.value(out).to_vec())?, w))
}

#[cfg(test)]
mod tests;
