//! Dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] is a single-use tape: forward values are computed at op
//! insertion, [`Graph::backward`] runs a reverse topological sweep from a
//! scalar root and accumulates gradients per node. Parameters live in a
//! [`ParamStore`] outside any graph; a graph borrows the store immutably for
//! the duration of a forward/backward pass and hands gradients back through
//! [`Graph::into_param_grads`].

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;

pub use adam::{clip_grad_norm, Adam};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, SchedulePos,
};
pub use graph::{Graph, NodeId};

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type DiffResult<T> = Result<T, DiffError>;

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Whether a graph leaf created from this tensor should receive a gradient.
    pub requires_grad: bool,
    /// Accumulated gradient, same shape as `data` when present.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![S::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    /// Marks the tensor as a gradient target and allocates the grad buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![S::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(S::zero());
        }
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors with gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total count of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Accumulates per-node gradients produced by a graph into the store.
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<S>)>) {
        for (pid, g) in grads {
            let buf = self.tensors[pid.0]
                .grad
                .as_mut()
                .expect("parameter without grad buffer");
            debug_assert_eq!(buf.len(), g.len());
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    /// Global L2 norm of all gradients, accumulated in f64.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0_f64;
        for t in &self.tensors {
            if let Some(g) = &t.grad {
                for &v in g {
                    let w = v.wide();
                    acc += w * w;
                }
            }
        }
        acc.sqrt()
    }

    pub fn scale_grads(&mut self, factor: S) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checks() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic]
    fn tensor_bad_length_panics() {
        let _ = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn store_accumulates_grads() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(vec![2]));
        store.accumulate(vec![(id, vec![1.0, 2.0])]);
        store.accumulate(vec![(id, vec![0.5, 0.5])]);
        assert_eq!(store.get(id).grad.as_ref().unwrap(), &vec![1.5, 2.5]);
        assert!((store.grad_norm() - (1.5f64 * 1.5 + 2.5 * 2.5).sqrt()).abs() < 1e-12);
    }
}
