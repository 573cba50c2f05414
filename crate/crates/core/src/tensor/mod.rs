//! Dense `f32` tensors, reverse-mode autodiff and the SGD optimizer.
//!
//! All arithmetic is single precision and every kernel runs its reductions in
//! a fixed order, so identical inputs give bit-identical outputs.

mod kernels;
mod optim;
mod params;
mod rng;
mod tape;

pub use optim::{Sgd, SgdConfig};
pub use params::{checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use rng::Rng;
pub use tape::{NormConfig, NormStats, Tape, Var};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major dense tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("non-empty shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("non-empty shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value]).unwrap()
    }

    /// A trainable tensor: `requires_grad` set and a zeroed gradient buffer.
    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(dim_err(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
        Ok(())
    }

    pub(crate) fn grad_and_data_mut(&mut self) -> (Option<&mut [f32]>, &mut [f32]) {
        (self.grad.as_deref_mut(), &mut self.data)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copies rows `[start, start + len)` along the leading axis.
    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Self> {
        let outer = self.shape[0];
        if len == 0 || start + len > outer {
            return Err(dim_err(format!(
                "rows {start}..{} out of leading extent {outer}",
                start + len
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(&shape, self.data[start * row..(start + len) * row].to_vec())
    }

    /// Gathers rows along the leading axis.
    pub fn gather_outer(&self, rows: &[usize]) -> Result<Self> {
        let outer = self.shape[0];
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= outer {
                return Err(dim_err(format!("row {r} out of leading extent {outer}")));
            }
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self::new(&shape, data)
    }
}
