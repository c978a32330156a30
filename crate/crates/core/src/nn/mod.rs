//! Hand-rolled neural network blocks with explicit forward/backward passes.
//!
//! Everything runs in f64 on the CPU. Each layer owns its parameters and
//! caches whatever the backward pass needs; `backward` consumes the gradient
//! of the loss w.r.t. the layer output, accumulates parameter gradients, and
//! returns the gradient w.r.t. the layer input. Gradient correctness is
//! pinned by central finite differences in the tests of every block.

pub mod adapters;
pub mod attention;
pub mod conv;
pub mod head;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod unet;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Dense tensor with a dynamic shape. Layout is row-major in the given axis
/// order (last axis fastest); feature maps use [B, C, X, Y, Z], embedding
/// stacks [B, K, D] or [K, D].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {:?} needs {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Uniform random entries in [-a, a].
    pub fn uniform(shape: &[usize], a: f64, rng: &mut ChaCha20Rng) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| rng.gen_range(-a..=a))
                .collect(),
        }
    }

    /// Flat index for a [B, K, D]-shaped tensor.
    #[inline]
    pub fn i3(&self, b: usize, k: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (b * self.shape[1] + k) * self.shape[2] + d
    }

    /// Flat index for a [N, D]-shaped tensor.
    #[inline]
    pub fn i2(&self, n: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        n * self.shape[1] + d
    }

    pub fn assert_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "expected {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }
}

/// A named trainable parameter with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Param {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "param value length mismatch");
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Param {
        let n: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; n])
    }

    /// Kaiming-style uniform init: U(-1/√fan_in, 1/√fan_in).
    pub fn kaiming(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha20Rng,
    ) -> Param {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        Param::new(name, shape, (0..n).map(|_| rng.gen_range(-a..=a)).collect())
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters. The visitor runs in a deterministic order,
/// which optimizer state and checkpoints rely on.
pub trait Module {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}

/// In-place ReLU forward returning the activation mask for backward.
pub fn relu_forward(x: &mut [f64]) -> Vec<bool> {
    x.iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

pub fn relu_backward(g: &mut [f64], mask: &[bool]) {
    for (gv, &on) in g.iter_mut().zip(mask) {
        if !on {
            *gv = 0.0;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax over the last axis of a [rows, n] slice, in place.
pub fn softmax_rows(data: &mut [f64], n: usize) {
    assert!(n > 0 && data.len() % n == 0);
    for row in data.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward of row-wise softmax: given y = softmax(x) and dL/dy, compute
/// dL/dx = y ⊙ (dL/dy − Σ_j dL/dy_j y_j) per row.
pub fn softmax_rows_backward(y: &[f64], gy: &[f64], n: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for r in 0..y.len() / n {
        let ys = &y[r * n..(r + 1) * n];
        let gs = &gy[r * n..(r + 1) * n];
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for i in 0..n {
            gx[r * n + i] = ys[i] * (gs[i] - dot);
        }
    }
    gx
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut r = rng::stream(20, "test.nn", 0);
        use rand::Rng;
        for n in [1usize, 3, 7] {
            let mut data: Vec<f64> = (0..n * 5).map(|_| r.gen_range(-30.0..30.0)).collect();
            softmax_rows(&mut data, n);
            for row in data.chunks_exact(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        use rand::Rng;
        let mut r = rng::stream(20, "test.nn", 1);
        let n = 4;
        let mut x: Vec<f64> = (0..2 * n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..2 * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let loss = |x: &[f64]| {
            let mut y = x.to_vec();
            softmax_rows(&mut y, n);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = x.clone();
        softmax_rows(&mut y, n);
        let analytic = softmax_rows_backward(&y, &w, n);
        let numeric = fd::numeric_grad(&mut x, 1e-6, loss);
        fd::assert_close(&analytic, &numeric, 1e-6, "softmax gx");
    }

    #[test]
    fn relu_roundtrip() {
        let mut x = vec![-1.0, 0.0, 2.0, -0.5];
        let mask = relu_forward(&mut x);
        assert_eq!(x, vec![0.0, 0.0, 2.0, 0.0]);
        let mut g = vec![1.0; 4];
        relu_backward(&mut g, &mask);
        assert_eq!(g, vec![0.0, 0.0, 1.0, 0.0]);
    }
}
