//! Adam optimizer over a [`ParamStore`].

use super::{ParamStore, Tensor};
use crate::scalar::Scalar;

/// Adam with bias correction. beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|(_, _, t)| vec![S::zero(); t.numel()]).collect(),
            v: store.iter().map(|(_, _, t)| vec![S::zero(); t.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently held by the store.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: S) {
        self.step += 1;
        let c1 = S::of(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let c2 = S::of(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let ob1 = S::of(1.0 - self.beta1);
        let ob2 = S::of(1.0 - self.beta2);
        let eps = S::of(self.eps);
        for (idx, (m, v)) in self.m.iter_mut().zip(&mut self.v).enumerate() {
            let p = store.get_mut(super::ParamId(idx));
            let grad = p.grad.take().expect("parameter without grad buffer");
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                let mhat = m[i] * c1;
                let vhat = v[i] * c2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            p.grad = Some(grad);
        }
    }

    /// Moment buffers flattened for checkpointing, in parameter order.
    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// Restores state from checkpointed moments.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Scales gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(S::of(max_norm / norm));
    }
    norm
}

#[allow(dead_code)]
fn _assert_tensor_api<S: Scalar>(t: &Tensor<S>) -> usize {
    t.numel()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add(
            "w",
            Tensor::new(vec![3], vec![0.1, -2.5, 3.75]),
        );
        let before = store.get(id).data().to_vec();
        store.accumulate(vec![(id, vec![1.0, -4.0, 0.5])]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.0);
        let after = store.get(id).data();
        for (b, a) in before.iter().zip(after) {
            assert_eq!(b.to_bits(), a.to_bits());
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn step_moves_against_gradient() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0]));
        store.accumulate(vec![(id, vec![2.0])]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1);
        assert!(store.get(id).data()[0] < 1.0);
    }

    #[test]
    fn clip_scales_large_gradients() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(vec![2]));
        store.accumulate(vec![(id, vec![3.0, 4.0])]);
        let norm = clip_grad_norm(&mut store, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let g = store.get(ParamId(0)).grad.as_ref().unwrap();
        let new_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((new_norm - 1.0).abs() < 1e-6);
    }
}
