//! Case loading: turns manifest entries into preprocessed in-memory cases
//! (windowed intensities, optional curvature channel, scheme-matched labels,
//! and supervision masks) shared by training and evaluation.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::{Labeling, Manifest, ManifestEntry};
use crate::nifti;
use crate::preproc::{
    collapse_labels, hessian_eigen_channel, remap_labels, supervision_mask, window_hu, SideSplit,
    SupervisionMask,
};
use crate::volume::{Grid3, LabelScheme, LabelVolume, Volume};

/// One fully preprocessed case held in memory.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub id: String,
    /// Input channels in network order: normalized intensity, then the
    /// curvature map when enabled.
    pub channels: Vec<Grid3<f32>>,
    /// Labels in the active scheme.
    pub labels: LabelVolume,
    pub mask: SupervisionMask,
    pub labeling: Labeling,
    pub side: SideSplit,
    pub spacing: [f64; 3],
}

/// Resolves the configured left/right assignment for a volume shape.
pub fn side_split_for(cfg: &RunConfig, shape: [usize; 3]) -> Result<SideSplit> {
    if cfg.side_split == "midplane" {
        return Ok(SideSplit::midplane(shape));
    }
    match cfg.side_split.strip_prefix("map:") {
        Some(path) if !path.is_empty() => {
            let map = nifti::read_labels(Path::new(path))?;
            if map.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "side map shape {:?} vs volume {:?}",
                    map.shape(),
                    shape
                )));
            }
            Ok(SideSplit::Map(map.data.map(|v| v != 0)))
        }
        _ => Err(Error::invalid(format!(
            "side_split '{}' must be 'midplane' or 'map:<path>'",
            cfg.side_split
        ))),
    }
}

/// Case id from the volume filename (`vol/case_0007.nii.gz` → `case_0007`).
pub fn case_id(entry: &ManifestEntry) -> String {
    let name = entry
        .volume
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.volume.to_string_lossy().into_owned());
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

/// Network input channels for a raw HU volume: the windowed intensity map,
/// plus the curvature map when enabled.
pub fn prepare_channels(vol: &Volume, cfg: &RunConfig) -> Result<Vec<Grid3<f32>>> {
    let windowed = window_hu(vol, cfg.hu_window[0], cfg.hu_window[1])?;
    let mut channels = vec![windowed.data.clone()];
    if cfg.use_hessian() {
        channels.push(hessian_eigen_channel(&windowed, cfg.hessian_sigma)?.data);
    }
    Ok(channels)
}

/// Loads and preprocesses a single case. Paths in `entry` must already be
/// resolved against the manifest location.
pub fn load_case(entry: &ManifestEntry, cfg: &RunConfig) -> Result<CaseData> {
    let vol = nifti::read_volume(&entry.volume)?;
    let raw_labels = nifti::read_labels(&entry.labels)?;
    if vol.shape() != raw_labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "case {}: volume {:?} vs labels {:?}",
            case_id(entry),
            vol.shape(),
            raw_labels.shape()
        )));
    }

    let channels = prepare_channels(&vol, cfg)?;

    let side = side_split_for(cfg, vol.shape())?;
    let labels = match (raw_labels.scheme, cfg.label_scheme()) {
        (LabelScheme::ThreeClass, LabelScheme::FiveClass) => remap_labels(&raw_labels, &side)?,
        (LabelScheme::FiveClass, LabelScheme::ThreeClass) => collapse_labels(&raw_labels)?,
        _ => raw_labels,
    };

    let mask = supervision_mask(entry.labeling, vol.shape(), &side)?;
    let mask = match cfg.label_scheme() {
        LabelScheme::ThreeClass => mask.collapse_to_three_class(),
        LabelScheme::FiveClass => mask,
    };

    Ok(CaseData {
        id: case_id(entry),
        channels,
        labels,
        mask,
        labeling: entry.labeling,
        side,
        spacing: [
            vol.spacing[0] as f64,
            vol.spacing[1] as f64,
            vol.spacing[2] as f64,
        ],
    })
}

/// Loads every case of a manifest, resolving relative paths against `root`.
pub fn load_cases(manifest: &Manifest, root: &Path, cfg: &RunConfig) -> Result<Vec<CaseData>> {
    let resolved = manifest.resolve_against(root);
    resolved.entries.iter().map(|e| load_case(e, cfg)).collect()
}
