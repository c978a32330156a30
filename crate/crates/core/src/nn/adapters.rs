//! Trainable adapters that sit between frozen encoders and the fusion block:
//! a per-class bottleneck stack for text embeddings and a pooled projection
//! head for image features.

use rand_chacha::ChaCha20Rng;

use super::linear::Linear;
use super::norm::ClassBatchNorm;
use super::attention::SelfAttentionBlock;
use super::{relu_backward, relu_forward, Module, Param, Tensor};
use crate::error::{Error, Result};

/// Adapter for the stack of K frozen class-prompt embeddings, shape [K, D].
/// Each class row passes through its own bottleneck MLP (down-project by
/// `ratio`, ReLU, up-project), the K rows are batch-normalized jointly, and
/// a shared self-attention block lets classes exchange information. An
/// optional residual adds the raw input back onto the final output.
#[derive(Debug, Clone)]
pub struct TextAdapterStack {
    pub downs: Vec<Linear>,
    pub ups: Vec<Linear>,
    pub bn: ClassBatchNorm,
    pub attn: SelfAttentionBlock,
    pub classes: usize,
    pub dim: usize,
    pub outer_residual: bool,
    relu_masks: Vec<Vec<bool>>,
}

impl TextAdapterStack {
    pub fn new(
        name: &str,
        classes: usize,
        dim: usize,
        ratio: usize,
        outer_residual: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<TextAdapterStack> {
        if ratio == 0 || dim % ratio != 0 {
            return Err(Error::invalid(format!(
                "bottleneck ratio {ratio} must divide embedding dim {dim}"
            )));
        }
        let mid = dim / ratio;
        let mut downs = Vec::with_capacity(classes);
        let mut ups = Vec::with_capacity(classes);
        for k in 0..classes {
            downs.push(Linear::new(&format!("{name}.mlp{k}.down"), dim, mid, true, rng));
            ups.push(Linear::new(&format!("{name}.mlp{k}.up"), mid, dim, true, rng));
        }
        Ok(TextAdapterStack {
            downs,
            ups,
            bn: ClassBatchNorm::new(&format!("{name}.bn"), dim),
            attn: SelfAttentionBlock::new(&format!("{name}.attn"), dim, rng),
            classes,
            dim,
            outer_residual,
            relu_masks: Vec::new(),
        })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape != [self.classes, self.dim] {
            return Err(Error::ShapeMismatch(format!(
                "text adapter ({}x{}) got {:?}",
                self.classes, self.dim, x.shape
            )));
        }
        self.relu_masks.clear();
        let mut stacked = Tensor::zeros(&[self.classes, self.dim]);
        for k in 0..self.classes {
            let row = Tensor::from_vec(&[1, self.dim], x.data[k * self.dim..(k + 1) * self.dim].to_vec())?;
            let mut h = self.downs[k].forward(&row)?;
            self.relu_masks.push(relu_forward(&mut h.data));
            let o = self.ups[k].forward(&h)?;
            stacked.data[k * self.dim..(k + 1) * self.dim].copy_from_slice(&o.data);
        }
        let normed = self.bn.forward(&stacked)?;
        let mut out = self.attn.forward(&normed)?;
        if self.outer_residual {
            for (o, i) in out.data.iter_mut().zip(&x.data) {
                *o += i;
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let g_normed = self.attn.backward(gout);
        let g_stacked = self.bn.backward(&g_normed);
        let mut gx = Tensor::zeros(&[self.classes, self.dim]);
        for k in 0..self.classes {
            let g_row = Tensor::from_vec(
                &[1, self.dim],
                g_stacked.data[k * self.dim..(k + 1) * self.dim].to_vec(),
            )
            .expect("row shape");
            let mut g_h = self.ups[k].backward(&g_row);
            relu_backward(&mut g_h.data, &self.relu_masks[k]);
            let g_in = self.downs[k].backward(&g_h);
            gx.data[k * self.dim..(k + 1) * self.dim].copy_from_slice(&g_in.data);
        }
        if self.outer_residual {
            for (g, o) in gx.data.iter_mut().zip(&gout.data) {
                *g += o;
            }
        }
        gx
    }
}

impl Module for TextAdapterStack {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for lin in self.downs.iter_mut().chain(self.ups.iter_mut()) {
            lin.visit_params(f);
        }
        self.bn.visit_params(f);
        self.attn.visit_params(f);
    }
}

/// Adapter for bottleneck image features [B, C, X, Y, Z]: global average
/// pool over the spatial axes, then a two-layer MLP C → D → D with a ReLU
/// in between. Output is [B, D].
#[derive(Debug, Clone)]
pub struct ImageAdapter {
    pub proj: Linear,
    pub out: Linear,
    pub in_channels: usize,
    pub dim: usize,
    relu_mask: Vec<bool>,
    spatial: usize,
    in_shape: Vec<usize>,
}

impl ImageAdapter {
    pub fn new(name: &str, in_channels: usize, dim: usize, rng: &mut ChaCha20Rng) -> ImageAdapter {
        ImageAdapter {
            proj: Linear::new(&format!("{name}.proj"), in_channels, dim, true, rng),
            out: Linear::new(&format!("{name}.out"), dim, dim, true, rng),
            in_channels,
            dim,
            relu_mask: Vec::new(),
            spatial: 0,
            in_shape: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 5 || x.shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "image adapter (C={}) got {:?}",
                self.in_channels, x.shape
            )));
        }
        let (b, c) = (x.shape[0], x.shape[1]);
        let nvox: usize = x.shape[2] * x.shape[3] * x.shape[4];
        let mut pooled = Tensor::zeros(&[b, c]);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * nvox;
                pooled.data[bi * c + ci] =
                    x.data[base..base + nvox].iter().sum::<f64>() / nvox as f64;
            }
        }
        self.spatial = nvox;
        self.in_shape = x.shape.clone();
        let mut h = self.proj.forward(&pooled)?;
        self.relu_mask = relu_forward(&mut h.data);
        self.out.forward(&h)
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let mut g_h = self.out.backward(gout);
        relu_backward(&mut g_h.data, &self.relu_mask);
        let g_pooled = self.proj.backward(&g_h);
        let (b, c) = (self.in_shape[0], self.in_shape[1]);
        let nvox = self.spatial;
        let mut gx = Tensor::zeros(&self.in_shape);
        for bi in 0..b {
            for ci in 0..c {
                let g = g_pooled.data[bi * c + ci] / nvox as f64;
                let base = (bi * c + ci) * nvox;
                gx.data[base..base + nvox].iter_mut().for_each(|v| *v = g);
            }
        }
        gx
    }
}

impl Module for ImageAdapter {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.proj.visit_params(f);
        self.out.visit_params(f);
    }
}

/// Duplicates a [B, D] embedding across K class slots, giving [B, K, D].
pub fn replicate_classes(x: &Tensor, classes: usize) -> Result<Tensor> {
    if x.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "replicate_classes expects [B, D], got {:?}",
            x.shape
        )));
    }
    let (b, d) = (x.shape[0], x.shape[1]);
    let mut out = Tensor::zeros(&[b, classes, d]);
    for bi in 0..b {
        for k in 0..classes {
            out.data[(bi * classes + k) * d..(bi * classes + k + 1) * d]
                .copy_from_slice(&x.data[bi * d..(bi + 1) * d]);
        }
    }
    Ok(out)
}

/// Backward of [`replicate_classes`]: sums gradients over the class axis.
pub fn replicate_classes_backward(gout: &Tensor) -> Tensor {
    let (b, classes, d) = (gout.shape[0], gout.shape[1], gout.shape[2]);
    let mut gx = Tensor::zeros(&[b, d]);
    for bi in 0..b {
        for k in 0..classes {
            for t in 0..d {
                gx.data[bi * d + t] += gout.data[(bi * classes + k) * d + t];
            }
        }
    }
    gx
}

/// Broadcasts an unbatched [K, D] stack to [B, K, D].
pub fn broadcast_batch(x: &Tensor, batch: usize) -> Result<Tensor> {
    if x.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "broadcast_batch expects [K, D], got {:?}",
            x.shape
        )));
    }
    let n = x.data.len();
    let mut out = Tensor::zeros(&[batch, x.shape[0], x.shape[1]]);
    for bi in 0..batch {
        out.data[bi * n..(bi + 1) * n].copy_from_slice(&x.data);
    }
    Ok(out)
}

/// Backward of [`broadcast_batch`]: sums gradients over the batch axis.
pub fn broadcast_batch_backward(gout: &Tensor) -> Tensor {
    let (b, kc, d) = (gout.shape[0], gout.shape[1], gout.shape[2]);
    let mut gx = Tensor::zeros(&[kc, d]);
    for bi in 0..b {
        for i in 0..kc * d {
            gx.data[i] += gout.data[bi * kc * d + i];
        }
    }
    gx
}
