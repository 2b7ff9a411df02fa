//! Central finite-difference gradient verification.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward implementation it is checking.

use super::Tensor;
use crate::scalar::Scalar;

/// Central finite differences of `eval` w.r.t. every element of every input.
///
/// `eval` must be a pure function of the inputs returning the scalar loss.
pub fn finite_diff<S, F>(inputs: &[Tensor<S>], eval: &F, h: f64) -> Vec<Vec<f64>>
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = vec![0.0; inputs[which].numel()];
        for i in 0..inputs[which].numel() {
            let mut plus: Vec<Tensor<S>> = inputs.to_vec();
            let mut minus: Vec<Tensor<S>> = inputs.to_vec();
            let base = inputs[which].data()[i].wide();
            plus[which].data_mut()[i] = S::of(base + h);
            minus[which].data_mut()[i] = S::of(base - h);
            let fp = eval(&plus);
            let fm = eval(&minus);
            g[i] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Relative error with an absolute floor, elementwise.
pub fn rel_errors(analytic: &[f64], numeric: &[f64], floor: f64) -> Vec<f64> {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

/// Summary of a gradient check across all elements and repetitions.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckStats {
    pub max_rel: f64,
    pub p95_rel: f64,
    pub n: usize,
}

pub fn summarize(mut errors: Vec<f64>) -> GradCheckStats {
    let n = errors.len();
    if n == 0 {
        return GradCheckStats {
            max_rel: 0.0,
            p95_rel: 0.0,
            n: 0,
        };
    }
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p95_idx = ((0.95 * n as f64).ceil() as usize).min(n) - 1;
    GradCheckStats {
        max_rel: errors[n - 1],
        p95_rel: errors[p95_idx],
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]);
        let g = finite_diff(
            &[x],
            &|ins: &[Tensor<f64>]| ins[0].data().iter().map(|v| v * v).sum(),
            1e-5,
        );
        let expect = [2.0, -4.0, 1.0];
        for (a, b) in g[0].iter().zip(expect) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn summarize_percentiles() {
        let stats = summarize((1..=100).map(|i| i as f64 * 1e-4).collect());
        assert!((stats.max_rel - 1e-2).abs() < 1e-12);
        assert!((stats.p95_rel - 95e-4).abs() < 1e-12);
    }
}
