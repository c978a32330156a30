//! Language-guided artery/vein segmentation for 3D CT volumes.
//!
//! The crate covers the full pipeline: NIfTI volume I/O, CT preprocessing and
//! curvature features, synthetic vascular phantoms for end-to-end checks, a
//! 3D convolutional encoder-decoder fused with text-prompt embeddings through
//! cross-attention, dynamically generated per-class segmentation heads, and
//! the training/evaluation loops that tie them together. All numerics are
//! plain Rust on the CPU with hand-written gradients.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod infer;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod preproc;
pub mod rng;
pub mod text;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ChannelTag, Grid3, LabelScheme, LabelVolume, Volume};
