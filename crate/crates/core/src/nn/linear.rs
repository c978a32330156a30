//! Fully connected layer over the last axis: [N, in] → [N, out].

use rand_chacha::ChaCha20Rng;

use super::{Module, Param, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param, // [out, in]
    pub b: Option<Param>,
    pub in_dim: usize,
    pub out_dim: usize,
    cache_x: Option<Tensor>,
}

impl Linear {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha20Rng,
    ) -> Linear {
        Linear {
            w: Param::kaiming(format!("{name}.w"), &[out_dim, in_dim], in_dim, rng),
            b: bias.then(|| Param::zeros(format!("{name}.b"), &[out_dim])),
            in_dim,
            out_dim,
            cache_x: None,
        }
    }

    /// All-zero weights and bias — used where a block must start as a no-op.
    pub fn zeros(name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        Linear {
            w: Param::zeros(format!("{name}.w"), &[out_dim, in_dim]),
            b: bias.then(|| Param::zeros(format!("{name}.b"), &[out_dim])),
            in_dim,
            out_dim,
            cache_x: None,
        }
    }

    /// Forward on [N, in_dim]; higher-rank inputs are treated as flattened
    /// rows over all leading axes.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let d = *x.shape.last().unwrap();
        if d != self.in_dim {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "linear {} expects last dim {}, got {:?}",
                self.w.name, self.in_dim, x.shape
            )));
        }
        let rows = x.numel() / d;
        let mut out_shape = x.shape.clone();
        *out_shape.last_mut().unwrap() = self.out_dim;
        let mut y = vec![0.0; rows * self.out_dim];
        for n in 0..rows {
            let xn = &x.data[n * d..(n + 1) * d];
            let yn = &mut y[n * self.out_dim..(n + 1) * self.out_dim];
            for o in 0..self.out_dim {
                let wrow = &self.w.value[o * d..(o + 1) * d];
                let mut acc = self.b.as_ref().map_or(0.0, |b| b.value[o]);
                for i in 0..d {
                    acc += wrow[i] * xn[i];
                }
                yn[o] = acc;
            }
        }
        self.cache_x = Some(x.clone());
        Tensor::from_vec(&out_shape, y)
    }

    /// Backward from dL/dy; accumulates weight/bias grads, returns dL/dx.
    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("backward before forward");
        let d = self.in_dim;
        let rows = x.numel() / d;
        assert_eq!(gy.numel(), rows * self.out_dim, "gy shape mismatch");
        let mut gx = vec![0.0; x.numel()];
        for n in 0..rows {
            let xn = &x.data[n * d..(n + 1) * d];
            let gyn = &gy.data[n * self.out_dim..(n + 1) * self.out_dim];
            let gxn = &mut gx[n * d..(n + 1) * d];
            for o in 0..self.out_dim {
                let g = gyn[o];
                if let Some(b) = &mut self.b {
                    b.grad[o] += g;
                }
                let wrow = &self.w.value[o * d..(o + 1) * d];
                let gwrow = &mut self.w.grad[o * d..(o + 1) * d];
                for i in 0..d {
                    gwrow[i] += g * xn[i];
                    gxn[i] += g * wrow[i];
                }
            }
        }
        Tensor::from_vec(&x.shape.clone(), gx).unwrap()
    }
}

impl Module for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}
