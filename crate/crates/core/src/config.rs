//! Run configuration: one TOML file drives dataset preprocessing, model
//! construction, training, and inference. Two built-in profiles cover a
//! laptop-sized smoke setup and the full-scale setup.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::text_sha256;
use crate::error::{Error, Result};
use crate::model::{FusionMode, ModelSpec};
use crate::text::{default_class_names, render_prompts, EmbedProvider, PromptTemplate};
use crate::volume::LabelScheme;

/// Environment variable that redirects all run outputs, so the same config
/// file can drive several runs side by side.
pub const OUT_DIR_ENV: &str = "AVSEG_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // --- data -----------------------------------------------------------
    /// TSV manifest listing volume/label pairs and their annotation extent.
    pub manifest: PathBuf,
    /// Output directory for checkpoints, logs, and reports
    /// (overridable via `AVSEG_OUT_DIR`).
    pub out_dir: PathBuf,
    /// Fractions of cases assigned to train/val/test.
    pub split: [u64; 3],

    // --- preprocessing ---------------------------------------------------
    /// Intensity clamp window in HU before rescaling to [0, 1].
    pub hu_window: [f32; 2],
    /// Append the largest-magnitude curvature (second-derivative eigenvalue)
    /// map as a second input channel.
    pub hessian_channel: bool,
    /// Smoothing scale (voxels) for the curvature map.
    pub hessian_sigma: f64,
    pub patch_size: [usize; 3],
    /// Probability that a training patch is centered on a foreground voxel.
    pub fg_bias: f64,
    /// `midplane` or `map:<path>` — how voxels are assigned to body sides.
    pub side_split: String,

    // --- ablation axes ---------------------------------------------------
    /// Curvature input channel plus side-aware four-class labels.
    /// Off trains plain artery/vein labels on the raw intensity channel.
    pub enriched_data: bool,
    /// Trainable text/image adapters with cross-attention fusion.
    /// Off sums the raw embeddings with the projected image feature.
    pub adaptive_fusion: bool,

    // --- text branch -----------------------------------------------------
    /// Prompt template id: v1..v4.
    pub prompt_template: String,
    /// `file:<path>` (precomputed table) or `stub:<seed>` (deterministic
    /// random unit vectors).
    pub embed_provider: String,
    pub embed_dim: usize,

    // --- adapters, fusion, head -------------------------------------------
    /// Bottleneck reduction ratio of the per-class text adapters.
    pub adapter_ratio: usize,
    /// Additive residual around the whole text adapter stack.
    pub adapter_residual: bool,
    /// Hidden width of the generated per-voxel classifier.
    pub c_mid: usize,
    /// Minimum class probability for a voxel to leave background.
    pub merge_threshold: f64,
    /// `cross_attention` or `plus`.
    pub fusion_mode: String,

    // --- backbone ----------------------------------------------------------
    pub unet_depth: usize,
    pub base_channels: usize,

    // --- optimization ------------------------------------------------------
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Run validation every N epochs (the best model is kept).
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    /// Desk-scale profile: small enough to train on one CPU core in minutes.
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("data/manifest.tsv"),
            out_dir: PathBuf::from("runs/desk"),
            split: [70, 15, 15],
            hu_window: [-700.0, 300.0],
            hessian_channel: true,
            hessian_sigma: 1.0,
            patch_size: [32, 32, 32],
            fg_bias: 0.85,
            side_split: "midplane".into(),
            enriched_data: true,
            adaptive_fusion: true,
            prompt_template: "v4".into(),
            embed_provider: "stub:17".into(),
            // Wide enough that the ratio-4 adapter bottleneck keeps several
            // hidden units. The text inputs are frozen, so a bottleneck unit
            // that starts dead for its class row can never revive; at width
            // 8 a whole class going dark is a ~0.4% event instead of ~6%.
            embed_dim: 32,
            adapter_ratio: 4,
            adapter_residual: false,
            c_mid: 8,
            merge_threshold: 0.5,
            fusion_mode: "cross_attention".into(),
            unet_depth: 3,
            base_channels: 8,
            lr: 8e-4,
            weight_decay: 1e-5,
            batch_size: 4,
            epochs: 12,
            validate_every: 2,
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-scale profile matching the clinical-data setup: 96³ patches,
    /// batch 4, a deeper backbone, and 512-wide text embeddings.
    pub fn full_scale() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/full"),
            patch_size: [96, 96, 96],
            embed_dim: 512,
            unet_depth: 4,
            base_channels: 16,
            batch_size: 4,
            epochs: 200,
            validate_every: 1,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::bad_file(path, format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.canonical()).map_err(|e| Error::io(path, e))
    }

    /// Canonical serialized form; field order is fixed, so equal configs
    /// serialize to equal bytes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    /// Fingerprint stored in checkpoints and reports.
    pub fn hash(&self) -> [u8; 32] {
        text_sha256(&self.canonical())
    }

    /// Output directory after applying the environment override.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match env::var(OUT_DIR_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    // --- derived settings -------------------------------------------------

    /// Label scheme after the data-enrichment toggle: side-aware four-class
    /// labels when on, plain artery/vein otherwise.
    pub fn label_scheme(&self) -> LabelScheme {
        if self.enriched_data {
            LabelScheme::FiveClass
        } else {
            LabelScheme::ThreeClass
        }
    }

    /// Foreground class count K.
    pub fn classes(&self) -> usize {
        match self.label_scheme() {
            LabelScheme::FiveClass => 4,
            LabelScheme::ThreeClass => 2,
        }
    }

    /// Whether the curvature channel is actually appended.
    pub fn use_hessian(&self) -> bool {
        self.hessian_channel && self.enriched_data
    }

    pub fn in_channels(&self) -> usize {
        1 + usize::from(self.use_hessian())
    }

    pub fn fusion(&self) -> Result<FusionMode> {
        if self.adaptive_fusion {
            FusionMode::parse(&self.fusion_mode)
        } else {
            Ok(FusionMode::Plus)
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            in_channels: self.in_channels(),
            classes: self.classes(),
            embed_dim: self.embed_dim,
            unet_depth: self.unet_depth,
            base_channels: self.base_channels,
            c_mid: self.c_mid,
            adapter_ratio: self.adapter_ratio,
            adapter_residual: self.adapter_residual,
            fusion_mode: self.fusion()?,
            adapter_passthrough: !self.adaptive_fusion,
        })
    }

    /// Rendered prompts for the active class set, in class order.
    pub fn prompts(&self) -> Result<Vec<String>> {
        let template = PromptTemplate::parse(&self.prompt_template)?;
        render_prompts(&template, &default_class_names(self.label_scheme()))
    }

    /// Opens the embedding provider (reads the table file if configured).
    pub fn embedder(&self) -> Result<EmbedProvider> {
        EmbedProvider::parse(&self.embed_provider, self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return Err(Error::invalid(
                "batch_size, epochs, and validate_every must be at least 1",
            ));
        }
        if self.hu_window[0] >= self.hu_window[1] {
            return Err(Error::invalid(format!(
                "hu_window [{}, {}] must be increasing",
                self.hu_window[0], self.hu_window[1]
            )));
        }
        if self.hessian_sigma <= 0.0 {
            return Err(Error::invalid("hessian_sigma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return Err(Error::invalid("fg_bias must lie in [0, 1]"));
        }
        if !(0.0 < self.merge_threshold && self.merge_threshold < 1.0) {
            return Err(Error::invalid("merge_threshold must lie in (0, 1)"));
        }
        if self.split.iter().sum::<u64>() == 0 {
            return Err(Error::invalid("split ratios must not all be zero"));
        }
        let stride = 1usize << (self.unet_depth.saturating_sub(1));
        for (axis, &p) in self.patch_size.iter().enumerate() {
            if p == 0 || p % stride != 0 {
                return Err(Error::invalid(format!(
                    "patch_size[{axis}] = {p} must be a positive multiple of {stride} \
                     (backbone depth {})",
                    self.unet_depth
                )));
            }
        }
        if self.side_split != "midplane" && !self.side_split.starts_with("map:") {
            return Err(Error::invalid(format!(
                "side_split '{}' must be 'midplane' or 'map:<path>'",
                self.side_split
            )));
        }
        PromptTemplate::parse(&self.prompt_template)?;
        self.fusion()?;
        // Syntactic check only; the file provider is opened lazily.
        match self.embed_provider.split_once(':') {
            Some(("stub", seed)) => {
                seed.parse::<u64>().map_err(|_| {
                    Error::invalid(format!("stub seed '{seed}' is not an integer"))
                })?;
            }
            Some(("file", path)) if !path.is_empty() => {}
            _ => {
                return Err(Error::invalid(format!(
                    "embed_provider '{}' must be 'file:<path>' or 'stub:<seed>'",
                    self.embed_provider
                )));
            }
        }
        self.model_spec()?.validate()
    }
}
