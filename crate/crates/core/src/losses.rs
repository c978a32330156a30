//! Supervised segmentation loss: ½·(soft Dice + binary cross-entropy) per
//! class, averaged over supervised classes and batch items. Half-labeled
//! cases contribute zero loss and zero gradient for their masked classes
//! and for voxels outside their annotated side.
//!
//! The Dice term is skipped for a class with no foreground voxel in a patch:
//! on absent classes soft Dice is pinned near one regardless of the
//! prediction, which drowns the learning signal for thin structures that
//! often miss a sampled patch. Cross-entropy alone suppresses false
//! positives there.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::preproc::SupervisionMask;
use crate::volume::Grid3;

/// Smoothing term in the soft Dice ratio; also makes the both-empty case 0.
pub const DICE_EPS: f64 = 1e-5;
/// Probability clamp for cross-entropy logs.
pub const CE_CLAMP: f64 = 1e-7;

/// Soft Dice loss `1 − (2Σpy + ε)/(Σp + Σy + ε)` over flat slices.
pub fn dice_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "dice_loss lengths {} vs {}",
            p.len(),
            y.len()
        )));
    }
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let sums: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sums + DICE_EPS))
}

/// dL/dp for [`dice_loss`].
pub fn dice_loss_grad(p: &[f64], y: &[f64]) -> Vec<f64> {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let denom: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>() + DICE_EPS;
    let numer = 2.0 * inter + DICE_EPS;
    y.iter()
        .map(|&yi| (numer - 2.0 * yi * denom) / (denom * denom))
        .collect()
}

/// Mean binary cross-entropy with probabilities clamped to [δ, 1−δ].
pub fn ce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "ce_loss lengths {} vs {}",
            p.len(),
            y.len()
        )));
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        acc -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
    }
    Ok(acc / p.len() as f64)
}

/// dL/dp for [`ce_loss`]; zero where the clamp is active.
pub fn ce_loss_grad(p: &[f64], y: &[f64]) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            if !(CE_CLAMP..=1.0 - CE_CLAMP).contains(&pi) {
                return 0.0;
            }
            (-yi / pi + (1.0 - yi) / (1.0 - pi)) / n
        })
        .collect()
}

/// Loss breakdown for one batch.
#[derive(Debug, Clone)]
pub struct LossReport {
    /// Mean over batch items of the per-item mean over supervised classes
    /// of ½(dice + ce).
    pub total: f64,
    /// Class label → (mean dice term over supervised items containing the
    /// class, mean ce term over all supervised items).
    pub per_class: BTreeMap<u8, (f64, f64)>,
    /// Class labels unsupervised in at least one batch item.
    pub masked_classes: BTreeSet<u8>,
}

/// Computes the supervised loss and its gradient with respect to the
/// predicted probabilities.
///
/// `probs` is [B, K, X, Y, Z]; `labels[b]` holds class ids on the matching
/// grid (x-fastest); class id `k+1` pairs with channel `k`. Voxels outside
/// an item's spatial mask and channels of unsupervised classes are excluded
/// from every sum, so their gradients are exactly zero.
pub fn sup_loss(
    probs: &Tensor,
    labels: &[Grid3<u8>],
    masks: &[SupervisionMask],
) -> Result<(LossReport, Tensor)> {
    if probs.shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "sup_loss expects [B, K, X, Y, Z], got {:?}",
            probs.shape
        )));
    }
    let (bsz, kc) = (probs.shape[0], probs.shape[1]);
    let (nx, ny, nz) = (probs.shape[2], probs.shape[3], probs.shape[4]);
    if labels.len() != bsz || masks.len() != bsz {
        return Err(Error::ShapeMismatch(format!(
            "sup_loss batch {} vs {} labels, {} masks",
            bsz,
            labels.len(),
            masks.len()
        )));
    }
    let nvox = nx * ny * nz;
    let mut grad = Tensor::zeros(&probs.shape);
    let mut total = 0.0;
    // Per class: (dice sum, items with foreground, ce sum, supervised items).
    let mut class_acc: BTreeMap<u8, (f64, usize, f64, usize)> = BTreeMap::new();
    let mut masked: BTreeSet<u8> = BTreeSet::new();

    // Scratch buffers reused across (b, k): masked-voxel values and their
    // tensor indices.
    let mut pv = Vec::with_capacity(nvox);
    let mut yv = Vec::with_capacity(nvox);
    let mut idx = Vec::with_capacity(nvox);

    for bi in 0..bsz {
        if labels[bi].shape() != [nx, ny, nz] {
            return Err(Error::ShapeMismatch(format!(
                "labels[{bi}] shape {:?} vs probs {:?}",
                labels[bi].shape(),
                probs.shape
            )));
        }
        let mask = &masks[bi];
        if let Some(sm) = &mask.spatial_mask {
            if sm.shape() != [nx, ny, nz] {
                return Err(Error::ShapeMismatch(format!(
                    "spatial mask shape {:?} vs probs {:?}",
                    sm.shape(),
                    probs.shape
                )));
            }
        }
        let supervised: Vec<u8> = (1..=kc as u8)
            .filter(|&c| mask.is_supervised(c))
            .collect();
        for c in 1..=kc as u8 {
            if !supervised.contains(&c) {
                masked.insert(c);
            }
        }
        if supervised.is_empty() {
            return Err(Error::invalid(format!(
                "batch item {bi} has no supervised classes"
            )));
        }
        let item_w = 1.0 / (bsz as f64 * supervised.len() as f64);
        for &c in &supervised {
            let k = (c - 1) as usize;
            pv.clear();
            yv.clear();
            idx.clear();
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        if let Some(sm) = &mask.spatial_mask {
                            if !sm.get(x, y, z) {
                                continue;
                            }
                        }
                        let ti = ((bi * kc + k) * nx + x) * ny * nz + y * nz + z;
                        pv.push(probs.data[ti]);
                        yv.push(if labels[bi].get(x, y, z) == c { 1.0 } else { 0.0 });
                        idx.push(ti);
                    }
                }
            }
            let has_fg = yv.iter().any(|&v| v > 0.0);
            let ce = ce_loss(&pv, &yv)?;
            let gc = ce_loss_grad(&pv, &yv);
            let e = class_acc.entry(c).or_insert((0.0, 0, 0.0, 0));
            if has_fg {
                let dice = dice_loss(&pv, &yv)?;
                total += item_w * 0.5 * (dice + ce);
                let gd = dice_loss_grad(&pv, &yv);
                for (j, &ti) in idx.iter().enumerate() {
                    grad.data[ti] = item_w * 0.5 * (gd[j] + gc[j]);
                }
                e.0 += dice;
                e.1 += 1;
            } else {
                total += item_w * 0.5 * ce;
                for (j, &ti) in idx.iter().enumerate() {
                    grad.data[ti] = item_w * 0.5 * gc[j];
                }
            }
            e.2 += ce;
            e.3 += 1;
        }
    }
    let per_class = class_acc
        .into_iter()
        .map(|(c, (d, dn, e, n))| (c, (d / dn.max(1) as f64, e / n as f64)))
        .collect();
    Ok((
        LossReport {
            total,
            per_class,
            masked_classes: masked,
        },
        grad,
    ))
}
