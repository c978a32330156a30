//! Full segmentation model: frozen text embeddings and a 3D U-Net feed
//! trainable adapters, cross-attention fusion, and a per-class dynamic head.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::adapters::{
    broadcast_batch, broadcast_batch_backward, replicate_classes, replicate_classes_backward,
    ImageAdapter, TextAdapterStack,
};
use crate::nn::attention::CrossAttentionFusion;
use crate::nn::head::{theta_len, DynamicHead, ThetaGenerator};
use crate::nn::unet::UNet3d;
use crate::nn::{Module, Param, Tensor};
use crate::preproc::{Patch, SupervisionMask};
use crate::volume::Grid3;

/// How adapted text and image embeddings are combined per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Text queries attend over image-informed keys/values.
    CrossAttention,
    /// Elementwise sum (ablation arm).
    Plus,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::Plus => "plus",
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "cross_attention" => Ok(FusionMode::CrossAttention),
            "plus" => Ok(FusionMode::Plus),
            other => Err(Error::invalid(format!(
                "unknown fusion mode '{other}' (expected cross_attention or plus)"
            ))),
        }
    }
}

/// Architectural hyperparameters; everything needed to rebuild the model
/// from a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// Input channels of the image patch (1, or 2 with the curvature map).
    pub in_channels: usize,
    /// Foreground classes K (4 for five-class labels, 2 for three-class).
    pub classes: usize,
    /// Text embedding width D.
    pub embed_dim: usize,
    pub unet_depth: usize,
    pub base_channels: usize,
    /// Hidden width of the generated per-voxel head.
    pub c_mid: usize,
    /// Bottleneck reduction ratio of the text adapter MLPs.
    pub adapter_ratio: usize,
    /// Additive residual around the whole text adapter stack.
    pub adapter_residual: bool,
    pub fusion_mode: FusionMode,
    /// When set, the text adapter is an identity (the image projection is
    /// structurally required to match dimensions and stays in place).
    pub adapter_passthrough: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("classes/in_channels/embed_dim must be positive"));
        }
        if self.c_mid == 0 {
            return Err(Error::invalid("c_mid must be positive"));
        }
        if self.adapter_ratio == 0 || self.embed_dim % self.adapter_ratio != 0 {
            return Err(Error::invalid(format!(
                "adapter ratio {} must divide embedding dim {}",
                self.adapter_ratio, self.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub spec: ModelSpec,
    /// None in passthrough mode: embeddings skip straight to fusion.
    pub text_adapter: Option<TextAdapterStack>,
    pub unet: UNet3d,
    pub image_adapter: ImageAdapter,
    /// None in `plus` fusion mode.
    pub fusion: Option<CrossAttentionFusion>,
    pub theta_gen: ThetaGenerator,
    pub head: DynamicHead,
    batch: usize,
}

impl SegModel {
    pub fn new(spec: &ModelSpec, rng: &mut ChaCha20Rng) -> Result<SegModel> {
        spec.validate()?;
        let text_adapter = if spec.adapter_passthrough {
            None
        } else {
            Some(TextAdapterStack::new(
                "model.text",
                spec.classes,
                spec.embed_dim,
                spec.adapter_ratio,
                spec.adapter_residual,
                rng,
            )?)
        };
        let unet = UNet3d::new(
            "model.unet",
            spec.in_channels,
            spec.unet_depth,
            spec.base_channels,
            rng,
        )?;
        let image_adapter =
            ImageAdapter::new("model.image", unet.bottleneck_channels(), spec.embed_dim, rng);
        let fusion = match spec.fusion_mode {
            FusionMode::CrossAttention => {
                Some(CrossAttentionFusion::new("model.fusion", spec.embed_dim, rng))
            }
            FusionMode::Plus => None,
        };
        let theta_gen = ThetaGenerator::new(
            "model.theta",
            spec.embed_dim,
            spec.base_channels,
            spec.c_mid,
            rng,
        );
        Ok(SegModel {
            spec: spec.clone(),
            text_adapter,
            unet,
            image_adapter,
            fusion,
            theta_gen,
            head: DynamicHead::new(spec.c_mid),
            batch: 0,
        })
    }

    /// Per-class probability maps [B, K, X, Y, Z] from an image patch
    /// [B, C, X, Y, Z] and frozen text embeddings [K, D].
    pub fn forward(&mut self, patch: &Tensor, text_embed: &Tensor) -> Result<Tensor> {
        if text_embed.shape != [self.spec.classes, self.spec.embed_dim] {
            return Err(Error::ShapeMismatch(format!(
                "text embeddings {:?}, expected [{}, {}]",
                text_embed.shape, self.spec.classes, self.spec.embed_dim
            )));
        }
        self.batch = patch.shape.first().copied().unwrap_or(0);
        let hta = match &mut self.text_adapter {
            Some(adapter) => adapter.forward(text_embed)?,
            None => text_embed.clone(),
        };
        let (v, f) = self.unet.forward(patch)?;
        let pooled = self.image_adapter.forward(&v)?;
        let hva = replicate_classes(&pooled, self.spec.classes)?;
        let htb = broadcast_batch(&hta, self.batch)?;
        let hf = match &mut self.fusion {
            Some(fusion) => {
                // Residual around the attention: the replicated image rows
                // are identical, so the attention output alone is the same
                // for every class; carrying the text query across the block
                // keeps the fused embedding — and hence θ_k — class-specific.
                let mut out = fusion.forward(&htb, &hva)?;
                for (o, t) in out.data.iter_mut().zip(&htb.data) {
                    *o += t;
                }
                out
            }
            None => {
                let mut sum = htb;
                for (s, v) in sum.data.iter_mut().zip(&hva.data) {
                    *s += v;
                }
                sum
            }
        };
        let theta = self.theta_gen.forward(&hf)?;
        self.head.forward(&f, &theta)
    }

    /// Backpropagates dL/d probabilities through every trainable part.
    /// Gradients accumulate on the parameters; the frozen text embeddings
    /// receive none by construction.
    pub fn backward(&mut self, g_probs: &Tensor) {
        let (g_f, g_theta) = self.head.backward(g_probs);
        let g_hf = self.theta_gen.backward(&g_theta);
        let (g_htb, g_hva) = match &mut self.fusion {
            Some(fusion) => {
                let (mut g_text, g_image) = fusion.backward(&g_hf);
                for (g, r) in g_text.data.iter_mut().zip(&g_hf.data) {
                    *g += r; // residual branch
                }
                (g_text, g_image)
            }
            None => (g_hf.clone(), g_hf),
        };
        let g_hta = broadcast_batch_backward(&g_htb);
        let g_pooled = replicate_classes_backward(&g_hva);
        let g_v = self.image_adapter.backward(&g_pooled);
        self.unet.backward(&g_v, &g_f);
        if let Some(adapter) = &mut self.text_adapter {
            adapter.backward(&g_hta);
        }
    }
}

impl Module for SegModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(adapter) = &mut self.text_adapter {
            adapter.visit_params(f);
        }
        self.unet.visit_params(f);
        self.image_adapter.visit_params(f);
        if let Some(fusion) = &mut self.fusion {
            fusion.visit_params(f);
        }
        self.theta_gen.visit_params(f);
    }
}

/// Head parameter-vector length for a model spec.
pub fn spec_theta_len(spec: &ModelSpec) -> usize {
    theta_len(spec.base_channels, spec.c_mid)
}

/// Stacks sampled patches into the network input tensor plus the per-item
/// label grids and supervision masks the loss consumes. Grids are x-fastest;
/// tensors store z contiguously, so this is where the transpose happens.
pub fn stack_patches(patches: &[Patch]) -> Result<(Tensor, Vec<Grid3<u8>>, Vec<SupervisionMask>)> {
    if patches.is_empty() {
        return Err(Error::invalid("empty patch batch"));
    }
    let channels: Vec<Vec<&Grid3<f32>>> = patches
        .iter()
        .map(|p| p.channels.iter().collect())
        .collect();
    let input = stack_channel_grids(&channels)?;
    let labels = patches.iter().map(|p| p.labels.clone()).collect();
    let masks = patches.iter().map(|p| p.mask.clone()).collect();
    Ok((input, labels, masks))
}

/// Builds a [B, C, X, Y, Z] tensor from per-item channel grids.
pub fn stack_channel_grids(items: &[Vec<&Grid3<f32>>]) -> Result<Tensor> {
    let first = items
        .first()
        .and_then(|c| c.first())
        .ok_or_else(|| Error::invalid("empty channel stack"))?;
    let [nx, ny, nz] = first.shape();
    let c = items[0].len();
    let mut out = Tensor::zeros(&[items.len(), c, nx, ny, nz]);
    for (bi, chans) in items.iter().enumerate() {
        if chans.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "item {bi} has {} channels, expected {c}",
                chans.len()
            )));
        }
        for (ci, grid) in chans.iter().enumerate() {
            if grid.shape() != [nx, ny, nz] {
                return Err(Error::ShapeMismatch(format!(
                    "item {bi} channel {ci} shape {:?} vs {:?}",
                    grid.shape(),
                    [nx, ny, nz]
                )));
            }
            let base = (bi * c + ci) * nx * ny * nz;
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        out.data[base + (x * ny + y) * nz + z] = grid.get(x, y, z) as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}
