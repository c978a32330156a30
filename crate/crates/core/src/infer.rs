//! Sliding-window inference over whole volumes and the evaluation protocol:
//! predictions are collapsed to artery/vein, half-labeled cases are scored
//! only on their annotated side, and the four metrics are averaged per
//! structure.

use crate::config::RunConfig;
use crate::dataset::CaseData;
use crate::error::{Error, Result};
use crate::manifest::Labeling;
use crate::metrics::{dsc, CaseRecord, MetricsReport, StructureMetrics};
use crate::model::{stack_channel_grids, SegModel};
use crate::nn::head::merge_predictions;
use crate::nn::Tensor;
use crate::preproc::collapse_labels;
use crate::volume::{Grid3, LabelScheme, LabelVolume};

/// Fraction of each window shared with its neighbor.
pub const WINDOW_OVERLAP: f64 = 0.5;

/// Surface-agreement tolerance for evaluation, in millimetres.
pub const NSD_TAU_MM: f64 = 1.0;

/// Start offsets of sliding windows along one axis. Windows advance by
/// `window·(1−overlap)` and the final window is clamped flush with the end,
/// so every position is covered and no window leaves the extent.
pub fn window_corners(extent: usize, window: usize, overlap: f64) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let stride = ((window as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut corners = Vec::new();
    let mut c = 0;
    loop {
        if c + window >= extent {
            corners.push(extent - window);
            return corners;
        }
        corners.push(c);
        c += stride;
    }
}

fn crop_channel(src: &Grid3<f32>, corner: [usize; 3], size: [usize; 3]) -> Grid3<f32> {
    Grid3::from_fn(size, |x, y, z| src.get(corner[0] + x, corner[1] + y, corner[2] + z))
}

fn pad_channel(src: &Grid3<f32>, size: [usize; 3]) -> Grid3<f32> {
    let [nx, ny, nz] = src.shape();
    Grid3::from_fn(size, |x, y, z| {
        if x < nx && y < ny && z < nz {
            src.get(x, y, z)
        } else {
            0.0
        }
    })
}

/// Per-class probabilities for a whole volume as a [1, K, nx, ny, nz]
/// tensor. Windows are predicted one at a time and overlapping regions are
/// averaged. Volumes smaller than the patch are zero padded and cropped back.
pub fn predict_probs(
    model: &mut SegModel,
    text: &Tensor,
    channels: &[Grid3<f32>],
    cfg: &RunConfig,
) -> Result<Tensor> {
    let first = channels
        .first()
        .ok_or_else(|| Error::invalid("prediction needs at least one channel"))?;
    if channels.len() != model.spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "{} input channels, model expects {}",
            channels.len(),
            model.spec.in_channels
        )));
    }
    let shape = first.shape();
    for c in channels {
        if c.shape() != shape {
            return Err(Error::ShapeMismatch("channel shapes differ".into()));
        }
    }
    let patch = cfg.patch_size;

    // Pad undersized axes up to the patch size, predict, then crop back.
    let padded: [usize; 3] = [
        shape[0].max(patch[0]),
        shape[1].max(patch[1]),
        shape[2].max(patch[2]),
    ];
    let storage: Vec<Grid3<f32>>;
    let work: &[Grid3<f32>] = if padded != shape {
        storage = channels.iter().map(|c| pad_channel(c, padded)).collect();
        &storage
    } else {
        channels
    };

    let k = model.spec.classes;
    let [nx, ny, nz] = padded;
    let mut acc = Tensor::zeros(&[1, k, nx, ny, nz]);
    let mut hits = vec![0.0f64; nx * ny * nz];

    for &cx in &window_corners(nx, patch[0], WINDOW_OVERLAP) {
        for &cy in &window_corners(ny, patch[1], WINDOW_OVERLAP) {
            for &cz in &window_corners(nz, patch[2], WINDOW_OVERLAP) {
                let crops: Vec<Grid3<f32>> = work
                    .iter()
                    .map(|c| crop_channel(c, [cx, cy, cz], patch))
                    .collect();
                let input = stack_channel_grids(&[crops.iter().collect()])?;
                let probs = model.forward(&input, text)?;
                for ki in 0..k {
                    for x in 0..patch[0] {
                        for y in 0..patch[1] {
                            for z in 0..patch[2] {
                                let src = ((ki * patch[0] + x) * patch[1] + y) * patch[2] + z;
                                let dst =
                                    ((ki * nx + cx + x) * ny + cy + y) * nz + cz + z;
                                acc.data[dst] += probs.data[src];
                            }
                        }
                    }
                }
                for x in 0..patch[0] {
                    for y in 0..patch[1] {
                        for z in 0..patch[2] {
                            hits[((cx + x) * ny + cy + y) * nz + cz + z] += 1.0;
                        }
                    }
                }
            }
        }
    }

    for ki in 0..k {
        for (i, &h) in hits.iter().enumerate() {
            acc.data[ki * nx * ny * nz + i] /= h;
        }
    }

    if padded == shape {
        return Ok(acc);
    }
    let [ox, oy, oz] = shape;
    let mut out = Tensor::zeros(&[1, k, ox, oy, oz]);
    for ki in 0..k {
        for x in 0..ox {
            for y in 0..oy {
                for z in 0..oz {
                    out.data[((ki * ox + x) * oy + y) * oz + z] =
                        acc.data[((ki * nx + x) * ny + y) * nz + z];
                }
            }
        }
    }
    Ok(out)
}

/// Hard label map for a whole volume in the model's label scheme.
pub fn predict_labels(
    model: &mut SegModel,
    text: &Tensor,
    channels: &[Grid3<f32>],
    cfg: &RunConfig,
) -> Result<Grid3<u8>> {
    let probs = predict_probs(model, text, channels, cfg)?;
    Ok(merge_predictions(&probs, cfg.merge_threshold)?.remove(0))
}

/// Predicted labels as a label volume carrying the case's geometry.
pub fn predict_label_volume(
    model: &mut SegModel,
    text: &Tensor,
    channels: &[Grid3<f32>],
    spacing: [f32; 3],
    origin: [f32; 3],
    cfg: &RunConfig,
) -> Result<LabelVolume> {
    let grid = predict_labels(model, text, channels, cfg)?;
    LabelVolume::new(grid, cfg.label_scheme(), spacing, origin)
}

/// Zeroes labels outside the annotated side of half-labeled cases so the
/// unannotated half cannot influence any metric.
fn mask_to_annotated(grid: &Grid3<u8>, case: &CaseData) -> Grid3<u8> {
    if case.labeling == Labeling::Full {
        return grid.clone();
    }
    let want_left = case.labeling == Labeling::HalfLeft;
    let [nx, ny, nz] = grid.shape();
    Grid3::from_fn([nx, ny, nz], |x, y, z| {
        if case.side.is_left(x, y, z) == want_left {
            grid.get(x, y, z)
        } else {
            0
        }
    })
}

/// Artery/vein metrics for one case given its predicted label map (in the
/// case's scheme). Predictions and ground truth are collapsed to the
/// two-structure scheme and masked to the annotated side first.
pub fn case_metrics(
    pred: &LabelVolume,
    case: &CaseData,
) -> Result<Vec<(String, StructureMetrics)>> {
    if pred.shape() != case.labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs labels {:?}",
            pred.shape(),
            case.labels.shape()
        )));
    }
    let collapse = |l: &LabelVolume| -> Result<Grid3<u8>> {
        Ok(match l.scheme {
            LabelScheme::FiveClass => collapse_labels(l)?.data,
            LabelScheme::ThreeClass => l.data.clone(),
        })
    };
    let pred3 = mask_to_annotated(&collapse(pred)?, case);
    let gt3 = mask_to_annotated(&collapse(&case.labels)?, case);
    let mut out = Vec::with_capacity(2);
    for (name, class) in [("artery", 1u8), ("vein", 2u8)] {
        let p = pred3.map(|v| v == class);
        let g = gt3.map(|v| v == class);
        out.push((
            name.to_string(),
            StructureMetrics::compute(&p, &g, case.spacing, NSD_TAU_MM)?,
        ));
    }
    Ok(out)
}

/// Mean Dice over (case, supervised class) pairs in the model's own scheme;
/// the model-selection signal during training. Stays in percent (0–100).
pub fn mean_val_dsc(
    model: &mut SegModel,
    text: &Tensor,
    cases: &[CaseData],
    cfg: &RunConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for case in cases {
        let pred = predict_labels(model, text, &case.channels, cfg)?;
        let pred = mask_to_annotated(&pred, case);
        let gt = mask_to_annotated(&case.labels.data, case);
        for &class in &case.mask.supervised_classes {
            let p = pred.map(|v| v == class);
            let g = gt.map(|v| v == class);
            sum += dsc(&p, &g)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("validation set supervises no classes"));
    }
    Ok(sum / n as f64)
}

/// Full evaluation: predict every case, collapse to artery/vein, mask
/// half-labeled cases to their annotated side, and aggregate.
pub fn evaluate(
    model: &mut SegModel,
    text: &Tensor,
    cases: &[CaseData],
    cfg: &RunConfig,
    checkpoint_id: &str,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut records = Vec::with_capacity(cases.len() * 2);
    for case in cases {
        let grid = predict_labels(model, text, &case.channels, cfg)?;
        let pred = LabelVolume::new(
            grid,
            cfg.label_scheme(),
            case.labels.spacing,
            case.labels.origin,
        )?;
        for (structure, metrics) in case_metrics(&pred, case)? {
            records.push(CaseRecord {
                case_id: case.id.clone(),
                structure,
                metrics,
            });
        }
    }
    Ok(MetricsReport::new(
        hex32(&cfg.hash()),
        cfg.seed,
        checkpoint_id.to_string(),
        records,
    ))
}

fn hex32(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
