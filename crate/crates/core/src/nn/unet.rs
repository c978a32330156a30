//! 3D U-Net encoder/decoder that exposes both the bottleneck feature map
//! (for pooled image embeddings) and the full-resolution decoder output
//! (for the per-voxel segmentation head).

use rand_chacha::ChaCha20Rng;

use super::conv::{Conv3d, MaxPool3d, Upsample2x};
use super::norm::InstanceNorm3d;
use super::{relu_backward, relu_forward, Module, Param, Tensor};
use crate::error::{Error, Result};

/// Two rounds of 3³ conv (pad 1) + instance norm + ReLU; spatial size is
/// preserved.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv3d,
    pub norm1: InstanceNorm3d,
    pub conv2: Conv3d,
    pub norm2: InstanceNorm3d,
    mask1: Vec<bool>,
    mask2: Vec<bool>,
}

impl ConvBlock {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha20Rng) -> ConvBlock {
        ConvBlock {
            conv1: Conv3d::new(&format!("{name}.conv1"), cin, cout, 3, 1, rng),
            norm1: InstanceNorm3d::new(&format!("{name}.norm1"), cout),
            conv2: Conv3d::new(&format!("{name}.conv2"), cout, cout, 3, 1, rng),
            norm2: InstanceNorm3d::new(&format!("{name}.norm2"), cout),
            mask1: Vec::new(),
            mask2: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.norm1.forward(&self.conv1.forward(x)?)?;
        self.mask1 = relu_forward(&mut h.data);
        let mut h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        self.mask2 = relu_forward(&mut h.data);
        Ok(h)
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let mut g = gout.clone();
        relu_backward(&mut g.data, &self.mask2);
        let g = self.conv2.backward(&self.norm2.backward(&g));
        let mut g = g;
        relu_backward(&mut g.data, &self.mask1);
        self.conv1.backward(&self.norm1.backward(&g))
    }
}

impl Module for ConvBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.norm1.visit_params(f);
        self.conv2.visit_params(f);
        self.norm2.visit_params(f);
    }
}

/// Concatenates two [B, C, X, Y, Z] tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 5
        || b.shape.len() != 5
        || a.shape[0] != b.shape[0]
        || a.shape[2..] != b.shape[2..]
    {
        return Err(Error::ShapeMismatch(format!(
            "channel concat got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (bsz, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
    let nvox: usize = a.shape[2..].iter().product();
    let mut out = Tensor::zeros(&[bsz, ca + cb, a.shape[2], a.shape[3], a.shape[4]]);
    for bi in 0..bsz {
        let dst = (bi * (ca + cb)) * nvox;
        out.data[dst..dst + ca * nvox]
            .copy_from_slice(&a.data[bi * ca * nvox..(bi + 1) * ca * nvox]);
        out.data[dst + ca * nvox..dst + (ca + cb) * nvox]
            .copy_from_slice(&b.data[bi * cb * nvox..(bi + 1) * cb * nvox]);
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (bsz, ctot) = (g.shape[0], g.shape[1]);
    let cb = ctot - ca;
    let nvox: usize = g.shape[2..].iter().product();
    let mut ga = Tensor::zeros(&[bsz, ca, g.shape[2], g.shape[3], g.shape[4]]);
    let mut gb = Tensor::zeros(&[bsz, cb, g.shape[2], g.shape[3], g.shape[4]]);
    for bi in 0..bsz {
        let src = bi * ctot * nvox;
        ga.data[bi * ca * nvox..(bi + 1) * ca * nvox]
            .copy_from_slice(&g.data[src..src + ca * nvox]);
        gb.data[bi * cb * nvox..(bi + 1) * cb * nvox]
            .copy_from_slice(&g.data[src + ca * nvox..src + ctot * nvox]);
    }
    (ga, gb)
}

/// U-Net over [B, C, X, Y, Z] inputs. Level i of the encoder has base·2^i
/// channels; each level below the first halves the spatial dims with 2³ max
/// pooling. The decoder mirrors the encoder with trilinear upsampling, a
/// channel-halving conv, and skip concatenation ([decoder, skip] order).
///
/// `forward` returns `(bottleneck, full_res)`: the deepest encoder output
/// with base·2^(depth−1) channels at 1/2^(depth−1) resolution, and the final
/// decoder output with `base` channels at input resolution.
#[derive(Debug, Clone)]
pub struct UNet3d {
    pub enc: Vec<ConvBlock>,
    pools: Vec<MaxPool3d>,
    ups: Vec<Upsample2x>,
    pub up_convs: Vec<Conv3d>,
    pub up_norms: Vec<InstanceNorm3d>,
    up_masks: Vec<Vec<bool>>,
    pub dec: Vec<ConvBlock>,
    pub in_channels: usize,
    pub depth: usize,
    pub base: usize,
    skips: Vec<Tensor>,
}

impl UNet3d {
    pub fn new(
        name: &str,
        in_channels: usize,
        depth: usize,
        base: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<UNet3d> {
        if depth < 2 {
            return Err(Error::invalid(format!("unet depth {depth} must be >= 2")));
        }
        if base == 0 || in_channels == 0 {
            return Err(Error::invalid("unet base/in channels must be positive"));
        }
        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { in_channels } else { base << (i - 1) };
            enc.push(ConvBlock::new(&format!("{name}.enc{i}"), cin, base << i, rng));
        }
        let mut up_convs = Vec::new();
        let mut up_norms = Vec::new();
        let mut dec = Vec::new();
        for j in 0..depth - 1 {
            let c_hi = base << (depth - 1 - j);
            let c_lo = base << (depth - 2 - j);
            up_convs.push(Conv3d::new(&format!("{name}.up{j}"), c_hi, c_lo, 3, 1, rng));
            up_norms.push(InstanceNorm3d::new(&format!("{name}.upnorm{j}"), c_lo));
            dec.push(ConvBlock::new(&format!("{name}.dec{j}"), 2 * c_lo, c_lo, rng));
        }
        Ok(UNet3d {
            enc,
            pools: vec![MaxPool3d::new(); depth - 1],
            ups: vec![Upsample2x::new(); depth - 1],
            up_convs,
            up_norms,
            up_masks: vec![Vec::new(); depth - 1],
            dec,
            in_channels,
            depth,
            base,
            skips: Vec::new(),
        })
    }

    /// Channel count of the bottleneck feature map.
    pub fn bottleneck_channels(&self) -> usize {
        self.base << (self.depth - 1)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape.len() != 5 || x.shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "unet ({} in ch) got {:?}",
                self.in_channels, x.shape
            )));
        }
        let div = 1usize << (self.depth - 1);
        for &n in &x.shape[2..] {
            if n % div != 0 || n == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "unet depth {} needs spatial dims divisible by {div}, got {:?}",
                    self.depth, x.shape
                )));
            }
        }
        self.skips.clear();
        let mut h = self.enc[0].forward(x)?;
        for i in 0..self.depth - 1 {
            self.skips.push(h.clone());
            h = self.pools[i].forward(&h)?;
            h = self.enc[i + 1].forward(&h)?;
        }
        let bottleneck = h.clone();
        for j in 0..self.depth - 1 {
            h = self.ups[j].forward(&h)?;
            h = self.up_norms[j].forward(&self.up_convs[j].forward(&h)?)?;
            self.up_masks[j] = relu_forward(&mut h.data);
            h = concat_channels(&h, &self.skips[self.depth - 2 - j])?;
            h = self.dec[j].forward(&h)?;
        }
        Ok((bottleneck, h))
    }

    /// Backward from gradients on both outputs; returns dL/d input.
    /// `g_bottleneck` must match the bottleneck shape, `g_full` the
    /// full-resolution output shape.
    pub fn backward(&mut self, g_bottleneck: &Tensor, g_full: &Tensor) -> Tensor {
        let mut g = g_full.clone();
        let mut g_skips: Vec<Option<Tensor>> = vec![None; self.depth - 1];
        for j in (0..self.depth - 1).rev() {
            g = self.dec[j].backward(&g);
            let skip_c = self.skips[self.depth - 2 - j].shape[1];
            let (mut g_up, g_skip) = split_channels(&g, g.shape[1] - skip_c);
            g_skips[self.depth - 2 - j] = Some(g_skip);
            relu_backward(&mut g_up.data, &self.up_masks[j]);
            let g_up = self.up_convs[j].backward(&self.up_norms[j].backward(&g_up));
            g = self.ups[j].backward(&g_up);
        }
        assert_eq!(g.shape, g_bottleneck.shape, "bottleneck gradient shape");
        for (gv, ge) in g.data.iter_mut().zip(&g_bottleneck.data) {
            *gv += ge;
        }
        for i in (0..self.depth - 1).rev() {
            g = self.enc[i + 1].backward(&g);
            g = self.pools[i].backward(&g);
            let gs = g_skips[i].take().expect("skip gradient");
            for (a, b) in g.data.iter_mut().zip(&gs.data) {
                *a += b;
            }
        }
        self.enc[0].backward(&g)
    }
}

impl Module for UNet3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.enc {
            b.visit_params(f);
        }
        for j in 0..self.up_convs.len() {
            self.up_convs[j].visit_params(f);
            self.up_norms[j].visit_params(f);
            self.dec[j].visit_params(f);
        }
    }
}
