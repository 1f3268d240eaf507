use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor's storage slot. Clones share the id so that a cloned
/// module binds to the tape the same way as the original.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major array of `f64` with an optional gradient accumulator.
///
/// The payload sits behind an `Arc`, so binding a parameter to a tape does
/// not copy it. Mutation goes through [`Tensor::data_mut`], which
/// copies-on-write only if a tape still holds the old payload.
#[derive(Clone, Debug)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = numel(shape);
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("shape and data agree")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = numel(shape);
        Tensor::new(shape.to_vec(), vec![value; n]).expect("shape and data agree")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("shape and data agree")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(Vec::new(), vec![value]).expect("shape and data agree")
    }

    /// Marks the tensor trainable and returns it.
    pub fn trainable(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Replaces the payload, keeping shape and identity.
    pub fn assign(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::dim("assign", &self.shape, &[data.len()]));
        }
        self.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also drops any accumulated gradient.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the accumulator. A frozen tensor ignores the call.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        let acc = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad
            .as_ref()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    /// Order-sensitive fingerprint of shape and payload bits.
    pub fn checksum(&self) -> u64 {
        let mut digest = CRC64.digest();
        for &e in &self.shape {
            digest.update(&(e as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            digest.update(&v.to_bits().to_le_bytes());
        }
        digest.finalize()
    }
}

pub(crate) const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182);
