//! Normalization layers: per-sample instance norm for feature maps and
//! batch norm over the class axis for embedding stacks. Both use batch
//! statistics only (no running averages) with learned scale and shift.

use super::{Module, Param, Tensor};
use crate::error::{Error, Result};

const EPS: f64 = 1e-5;

/// Instance normalization over the spatial axes of a [B, C, X, Y, Z] map:
/// each (sample, channel) slab is standardized independently, then scaled by
/// the channel's γ and shifted by β.
#[derive(Debug, Clone)]
pub struct InstanceNorm3d {
    pub gamma: Param, // [C]
    pub beta: Param,  // [C]
    pub channels: usize,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    xhat: Tensor,
    inv_std: Vec<f64>, // one per (b, c) slab
}

impl InstanceNorm3d {
    pub fn new(name: &str, channels: usize) -> InstanceNorm3d {
        InstanceNorm3d {
            gamma: Param::new(format!("{name}.gamma"), &[channels], vec![1.0; channels]),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 5 || x.shape[1] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "instance norm ({} ch) got {:?}",
                self.channels, x.shape
            )));
        }
        let (b, c) = (x.shape[0], x.shape[1]);
        let n = x.shape[2] * x.shape[3] * x.shape[4];
        let mut xhat = Tensor::zeros(&x.shape);
        let mut out = Tensor::zeros(&x.shape);
        let mut inv_std = Vec::with_capacity(b * c);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * n;
                let slab = &x.data[base..base + n];
                let mean = slab.iter().sum::<f64>() / n as f64;
                let var = slab.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let istd = 1.0 / (var + EPS).sqrt();
                inv_std.push(istd);
                let (g, bt) = (self.gamma.value[ci], self.beta.value[ci]);
                for i in 0..n {
                    let xh = (slab[i] - mean) * istd;
                    xhat.data[base + i] = xh;
                    out.data[base + i] = g * xh + bt;
                }
            }
        }
        self.cache = Some(Cache { xhat, inv_std });
        Ok(out)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("backward before forward");
        let shape = &cache.xhat.shape;
        let (b, c) = (shape[0], shape[1]);
        let n = shape[2] * shape[3] * shape[4];
        let mut gx = Tensor::zeros(shape);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * n;
                let xh = &cache.xhat.data[base..base + n];
                let g = &gy.data[base..base + n];
                let istd = cache.inv_std[bi * c + ci];
                let gamma = self.gamma.value[ci];
                let mean_g = g.iter().sum::<f64>() / n as f64;
                let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                self.beta.grad[ci] += g.iter().sum::<f64>();
                self.gamma.grad[ci] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                for i in 0..n {
                    gx.data[base + i] = gamma * istd * (g[i] - mean_g - xh[i] * mean_gx);
                }
            }
        }
        gx
    }
}

impl Module for InstanceNorm3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Batch normalization treating the K class rows of a [K, D] stack as the
/// batch: each feature column is standardized over classes.
#[derive(Debug, Clone)]
pub struct ClassBatchNorm {
    pub gamma: Param, // [D]
    pub beta: Param,  // [D]
    pub dim: usize,
    cache: Option<(Tensor, Vec<f64>)>, // (xhat, inv_std per column)
}

impl ClassBatchNorm {
    pub fn new(name: &str, dim: usize) -> ClassBatchNorm {
        ClassBatchNorm {
            gamma: Param::new(format!("{name}.gamma"), &[dim], vec![1.0; dim]),
            beta: Param::zeros(format!("{name}.beta"), &[dim]),
            dim,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || x.shape[1] != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "class batch norm (D={}) got {:?}",
                self.dim, x.shape
            )));
        }
        let (k, d) = (x.shape[0], x.shape[1]);
        let mut xhat = Tensor::zeros(&x.shape);
        let mut out = Tensor::zeros(&x.shape);
        let mut inv_std = Vec::with_capacity(d);
        for di in 0..d {
            let mean = (0..k).map(|ki| x.data[ki * d + di]).sum::<f64>() / k as f64;
            let var = (0..k)
                .map(|ki| (x.data[ki * d + di] - mean).powi(2))
                .sum::<f64>()
                / k as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd);
            for ki in 0..k {
                let xh = (x.data[ki * d + di] - mean) * istd;
                xhat.data[ki * d + di] = xh;
                out.data[ki * d + di] = self.gamma.value[di] * xh + self.beta.value[di];
            }
        }
        self.cache = Some((xhat, inv_std));
        Ok(out)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.as_ref().expect("backward before forward");
        let (k, d) = (xhat.shape[0], xhat.shape[1]);
        let mut gx = Tensor::zeros(&xhat.shape);
        for di in 0..d {
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for ki in 0..k {
                let g = gy.data[ki * d + di];
                mean_g += g;
                mean_gx += g * xhat.data[ki * d + di];
                self.beta.grad[di] += g;
                self.gamma.grad[di] += g * xhat.data[ki * d + di];
            }
            mean_g /= k as f64;
            mean_gx /= k as f64;
            for ki in 0..k {
                let g = gy.data[ki * d + di];
                gx.data[ki * d + di] = self.gamma.value[di]
                    * inv_std[di]
                    * (g - mean_g - xhat.data[ki * d + di] * mean_gx);
            }
        }
        gx
    }
}

impl Module for ClassBatchNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
