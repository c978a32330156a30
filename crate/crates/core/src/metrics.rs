//! Segmentation evaluation: overlap metrics (DSC, Jaccard) and surface
//! metrics (HD95, NSD) over binary masks with physical voxel spacing.
//!
//! Surface metrics ride on an exact Euclidean distance transform, so they
//! scale to full volumes; tests pin them against brute-force all-pairs
//! oracles on small masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Grid3;

// ---------------------------------------------------------------------------
// Overlap metrics
// ---------------------------------------------------------------------------

fn check_shapes(pred: &Grid3<bool>, gt: &Grid3<bool>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn overlap_counts(pred: &Grid3<bool>, gt: &Grid3<bool>) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut np = 0;
    let mut ng = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    (inter, np, ng)
}

/// Dice similarity coefficient in percent. Two empty masks score 100.
pub fn dsc(pred: &Grid3<bool>, gt: &Grid3<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (inter, np, ng) = overlap_counts(pred, gt);
    if np + ng == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (np + ng) as f64)
}

/// Jaccard index in percent. Two empty masks score 100.
pub fn jaccard(pred: &Grid3<bool>, gt: &Grid3<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (inter, np, ng) = overlap_counts(pred, gt);
    let union = np + ng - inter;
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

// ---------------------------------------------------------------------------
// Surfaces and distance transforms
// ---------------------------------------------------------------------------

/// Border voxels of a mask: mask voxels with at least one of their six
/// face neighbors outside the mask (out-of-bounds counts as background).
pub fn border_voxels(mask: &Grid3<bool>) -> Grid3<bool> {
    let [nx, ny, nz] = mask.shape();
    Grid3::from_fn(mask.shape(), |x, y, z| {
        if !mask.get(x, y, z) {
            return false;
        }
        let neighbors = [
            (x.wrapping_sub(1), y, z),
            (x + 1, y, z),
            (x, y.wrapping_sub(1), z),
            (x, y + 1, z),
            (x, y, z.wrapping_sub(1)),
            (x, y, z + 1),
        ];
        neighbors
            .iter()
            .any(|&(a, b, c)| a >= nx || b >= ny || c >= nz || !mask.get(a, b, c))
    })
}

/// Squared Euclidean distance (mm²) from every voxel center to the nearest
/// `true` voxel center, exact via the lower-envelope-of-parabolas transform
/// run once per axis with that axis's physical spacing. An empty mask yields
/// infinity everywhere.
pub fn distance_sq_field(mask: &Grid3<bool>, spacing: [f64; 3]) -> Grid3<f64> {
    let [nx, ny, nz] = mask.shape();
    let mut field: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();

    let dims = [nx, ny, nz];
    let mut row = Vec::new();
    let mut out_row = Vec::new();
    let mut abscissa = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let s = spacing[axis];
        abscissa.clear();
        abscissa.extend((0..n).map(|i| i as f64 * s));
        // Strides for walking one row along `axis`.
        let (fix_a, fix_b) = match axis {
            0 => (dims[1], dims[2]),
            1 => (dims[0], dims[2]),
            _ => (dims[0], dims[1]),
        };
        let index = |axis_i: usize, a: usize, b: usize| -> usize {
            let (x, y, z) = match axis {
                0 => (axis_i, a, b),
                1 => (a, axis_i, b),
                _ => (a, b, axis_i),
            };
            x + nx * (y + ny * z)
        };
        for b in 0..fix_b {
            for a in 0..fix_a {
                row.clear();
                row.extend((0..n).map(|i| field[index(i, a, b)]));
                dt1d(&row, &abscissa, &mut out_row);
                for i in 0..n {
                    field[index(i, a, b)] = out_row[i];
                }
            }
        }
    }
    Grid3::from_vec(mask.shape(), field).unwrap()
}

/// One-dimensional squared-distance transform over arbitrary abscissas:
/// `out[i] = min_j (a[i] - a[j])² + f[j]`. Infinite inputs (no source in the
/// row yet) are skipped when building the envelope.
fn dt1d(f: &[f64], a: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    // Parabola index stack and the left boundary of each parabola's reign.
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    // Intersection of parabolas rooted at a[p] and a[q].
                    let s = ((f[q] + a[q] * a[q]) - (f[p] + a[p] * a[p]))
                        / (2.0 * (a[q] - a[p]));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let mut k = 0;
    for i in 0..n {
        while k + 1 < v.len() && z[k + 1] < a[i] {
            k += 1;
        }
        let d = a[i] - a[v[k]];
        out.push(d * d + f[v[k]]);
    }
}

/// Pooled symmetric surface-to-surface distances in mm: for every border
/// voxel of `pred` its distance to the nearest border voxel of `gt`, and
/// vice versa, concatenated (pred direction first, canonical voxel order).
/// Returns `None` when either mask is empty.
pub fn surface_distances(
    pred: &Grid3<bool>,
    gt: &Grid3<bool>,
    spacing: [f64; 3],
) -> Result<Option<Vec<f64>>> {
    check_shapes(pred, gt)?;
    if !pred.data().iter().any(|&b| b) || !gt.data().iter().any(|&b| b) {
        return Ok(None);
    }
    let sp = border_voxels(pred);
    let sg = border_voxels(gt);
    let to_gt = distance_sq_field(&sg, spacing);
    let to_pred = distance_sq_field(&sp, spacing);
    let mut pooled = Vec::new();
    for (i, &b) in sp.data().iter().enumerate() {
        if b {
            pooled.push(to_gt.data()[i].sqrt());
        }
    }
    for (i, &b) in sg.data().iter().enumerate() {
        if b {
            pooled.push(to_pred.data()[i].sqrt());
        }
    }
    Ok(Some(pooled))
}

/// Percentile with linear interpolation between closest ranks
/// (`q` in [0, 100]); input need not be sorted.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Physical-extent diagonal of a grid in mm — the sentinel HD95 for cases
/// where a structure is missing from one of the masks.
pub fn extent_diagonal(shape: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| (shape[i] as f64 * spacing[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 95th-percentile symmetric surface distance in mm. When either mask is
/// empty the physical-extent diagonal is returned as a worst-case sentinel.
pub fn hd95(pred: &Grid3<bool>, gt: &Grid3<bool>, spacing: [f64; 3]) -> Result<f64> {
    match surface_distances(pred, gt, spacing)? {
        Some(pooled) => Ok(percentile(&pooled, 95.0)),
        None => Ok(extent_diagonal(pred.shape(), spacing)),
    }
}

/// Normalized surface distance: the fraction of pooled boundary points lying
/// within `tau` mm of the opposing surface. Higher is better, in [0, 1].
/// Both masks empty → 1; exactly one empty → 0.
pub fn nsd(pred: &Grid3<bool>, gt: &Grid3<bool>, tau: f64, spacing: [f64; 3]) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("nsd tolerance {tau} must be ≥ 0")));
    }
    check_shapes(pred, gt)?;
    let pred_empty = !pred.data().iter().any(|&b| b);
    let gt_empty = !gt.data().iter().any(|&b| b);
    if pred_empty && gt_empty {
        return Ok(1.0);
    }
    if pred_empty || gt_empty {
        return Ok(0.0);
    }
    // Compare in squared units; the transform yields exact squares.
    let sp = border_voxels(pred);
    let sg = border_voxels(gt);
    let to_gt = distance_sq_field(&sg, spacing);
    let to_pred = distance_sq_field(&sp, spacing);
    let tau_sq = tau * tau;
    let mut within = 0usize;
    let mut total = 0usize;
    for (i, &b) in sp.data().iter().enumerate() {
        if b {
            total += 1;
            within += usize::from(to_gt.data()[i] <= tau_sq);
        }
    }
    for (i, &b) in sg.data().iter().enumerate() {
        if b {
            total += 1;
            within += usize::from(to_pred.data()[i] <= tau_sq);
        }
    }
    Ok(within as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// The four metrics for one structure of one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub dsc: f64,
    pub jaccard: f64,
    pub nsd: f64,
    pub hd95: f64,
}

impl StructureMetrics {
    /// All four metrics of `pred` vs `gt` at once.
    pub fn compute(
        pred: &Grid3<bool>,
        gt: &Grid3<bool>,
        spacing: [f64; 3],
        tau: f64,
    ) -> Result<StructureMetrics> {
        Ok(StructureMetrics {
            dsc: dsc(pred, gt)?,
            jaccard: jaccard(pred, gt)?,
            nsd: nsd(pred, gt, tau, spacing)?,
            hd95: hd95(pred, gt, spacing)?,
        })
    }
}

/// One evaluated (case, structure) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub structure: String,
    #[serde(flatten)]
    pub metrics: StructureMetrics,
}

/// Full evaluation output: per-case records plus per-structure means and the
/// run provenance needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: String,
    pub records: Vec<CaseRecord>,
    /// Structure name → mean metrics over cases (sentinel HD95s included).
    pub summary: BTreeMap<String, StructureMetrics>,
}

impl MetricsReport {
    pub fn new(
        config_hash: String,
        seed: u64,
        checkpoint: String,
        records: Vec<CaseRecord>,
    ) -> MetricsReport {
        let mut sums: BTreeMap<String, (StructureMetrics, usize)> = BTreeMap::new();
        for r in &records {
            let e = sums.entry(r.structure.clone()).or_insert((
                StructureMetrics {
                    dsc: 0.0,
                    jaccard: 0.0,
                    nsd: 0.0,
                    hd95: 0.0,
                },
                0,
            ));
            e.0.dsc += r.metrics.dsc;
            e.0.jaccard += r.metrics.jaccard;
            e.0.nsd += r.metrics.nsd;
            e.0.hd95 += r.metrics.hd95;
            e.1 += 1;
        }
        let summary = sums
            .into_iter()
            .map(|(k, (s, n))| {
                let n = n as f64;
                (
                    k,
                    StructureMetrics {
                        dsc: s.dsc / n,
                        jaccard: s.jaccard / n,
                        nsd: s.nsd / n,
                        hd95: s.hd95 / n,
                    },
                )
            })
            .collect();
        MetricsReport {
            config_hash,
            seed,
            checkpoint,
            records,
            summary,
        }
    }

    /// One JSON record per case-structure line, then one summary line per
    /// structure; field order is fixed so reports diff cleanly.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut line = serde_json::json!({"record": "case"});
            let obj = line.as_object_mut().unwrap();
            obj.insert("case_id".into(), r.case_id.clone().into());
            obj.insert("structure".into(), r.structure.clone().into());
            obj.insert("dsc".into(), r.metrics.dsc.into());
            obj.insert("jaccard".into(), r.metrics.jaccard.into());
            obj.insert("nsd".into(), r.metrics.nsd.into());
            obj.insert("hd95".into(), r.metrics.hd95.into());
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        for (structure, m) in &self.summary {
            let line = serde_json::json!({
                "record": "summary",
                "structure": structure,
                "dsc": m.dsc,
                "jaccard": m.jaccard,
                "nsd": m.nsd,
                "hd95": m.hd95,
                "cases": self.records.iter().filter(|r| &r.structure == structure).count(),
                "config_hash": self.config_hash,
                "seed": self.seed,
                "checkpoint": self.checkpoint,
            });
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn mask(shape: [usize; 3], f: impl FnMut(usize, usize, usize) -> bool) -> Grid3<bool> {
        Grid3::from_fn(shape, f)
    }

    // -- overlap -------------------------------------------------------------

    #[test]
    fn dsc_pinned_values() {
        let a = mask([4, 4, 4], |x, _, _| x < 2);
        assert_eq!(dsc(&a, &a).unwrap(), 100.0);
        // |pred| = |gt| = 4, overlap 2 → 2·2/(4+4) = 50%.
        let p = mask([8, 1, 1], |x, _, _| x < 4);
        let g = mask([8, 1, 1], |x, _, _| (2..6).contains(&x));
        assert_eq!(dsc(&p, &g).unwrap(), 50.0);
        let q = mask([8, 1, 1], |x, _, _| x >= 6);
        assert_eq!(dsc(&p, &q).unwrap(), 0.0);
        let e = mask([4, 4, 4], |_, _, _| false);
        assert_eq!(dsc(&e, &e).unwrap(), 100.0);
    }

    #[test]
    fn jaccard_pinned_values() {
        let a = mask([4, 4, 4], |x, y, _| x == 0 && y < 2);
        assert_eq!(jaccard(&a, &a).unwrap(), 100.0);
        // |∩| = 2, |∪| = 6.
        let p = mask([8, 1, 1], |x, _, _| x < 4);
        let g = mask([8, 1, 1], |x, _, _| (2..6).contains(&x));
        assert!((jaccard(&p, &g).unwrap() - 100.0 * 2.0 / 6.0).abs() < 1e-12);
        let e = mask([4, 4, 4], |_, _, _| false);
        assert_eq!(jaccard(&e, &e).unwrap(), 100.0);
        assert_eq!(jaccard(&e, &a).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_dice_identity_on_random_masks() {
        let mut r = rng::stream(11, "test.metrics", 0);
        for _ in 0..50 {
            let p = mask([6, 6, 6], |_, _, _| r.gen_bool(0.3));
            let g = mask([6, 6, 6], |_, _, _| r.gen_bool(0.3));
            let d = dsc(&p, &g).unwrap() / 100.0;
            let j = jaccard(&p, &g).unwrap() / 100.0;
            assert!((j - d / (2.0 - d)).abs() < 1e-9, "J {j} vs D {d}");
        }
    }

    // -- surfaces ------------------------------------------------------------

    #[test]
    fn border_of_solid_cube_is_its_shell() {
        let m = mask([8, 8, 8], |x, y, z| {
            (1..5).contains(&x) && (1..5).contains(&y) && (1..5).contains(&z)
        });
        let b = border_voxels(&m);
        let count = b.data().iter().filter(|&&v| v).count();
        assert_eq!(count, 4 * 4 * 4 - 2 * 2 * 2); // 4³ cube minus 2³ interior
    }

    #[test]
    fn border_counts_volume_edge_as_background() {
        let m = mask([3, 3, 3], |_, _, _| true);
        let b = border_voxels(&m);
        // Only the very center voxel is interior.
        assert_eq!(b.data().iter().filter(|&&v| v).count(), 26);
        assert!(!b.get(1, 1, 1));
    }

    // -- distance transform ---------------------------------------------------

    /// Brute-force all-pairs squared distance to the nearest true voxel.
    fn naive_dist_sq(m: &Grid3<bool>, spacing: [f64; 3]) -> Grid3<f64> {
        let [nx, ny, nz] = m.shape();
        let mut sources = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if m.get(x, y, z) {
                        sources.push([x as f64, y as f64, z as f64]);
                    }
                }
            }
        }
        Grid3::from_fn(m.shape(), |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            sources
                .iter()
                .map(|s| {
                    (0..3)
                        .map(|i| ((p[i] - s[i]) * spacing[i]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
    }

    #[test]
    fn distance_transform_matches_naive_bit_exact_on_dyadic_spacing() {
        let mut r = rng::stream(12, "test.metrics", 1);
        for trial in 0..10 {
            let m = mask([7, 6, 5], |_, _, _| r.gen_bool(0.15));
            if !m.data().iter().any(|&b| b) {
                continue;
            }
            let spacing = if trial % 2 == 0 { [1.0, 1.0, 1.0] } else { [0.5, 1.0, 2.0] };
            let fast = distance_sq_field(&m, spacing);
            let slow = naive_dist_sq(&m, spacing);
            for i in 0..fast.len() {
                assert_eq!(fast.data()[i], slow.data()[i], "voxel {i}");
            }
        }
    }

    #[test]
    fn distance_transform_matches_naive_on_general_spacing() {
        let mut r = rng::stream(12, "test.metrics", 2);
        let m = mask([9, 7, 6], |_, _, _| r.gen_bool(0.1));
        let spacing = [0.3, 0.7, 1.1];
        let fast = distance_sq_field(&m, spacing);
        let slow = naive_dist_sq(&m, spacing);
        for i in 0..fast.len() {
            if slow.data()[i].is_finite() {
                assert!((fast.data()[i] - slow.data()[i]).abs() < 1e-9);
            } else {
                assert!(!fast.data()[i].is_finite());
            }
        }
    }

    #[test]
    fn distance_transform_empty_mask_is_infinite() {
        let m = mask([4, 4, 4], |_, _, _| false);
        let d = distance_sq_field(&m, [1.0; 3]);
        assert!(d.data().iter().all(|v| v.is_infinite()));
    }

    // -- hd95 ----------------------------------------------------------------

    #[test]
    fn hd95_identical_masks_is_zero() {
        let m = mask([8, 8, 8], |x, y, z| x / 2 + y / 3 + z / 4 == 1);
        assert_eq!(hd95(&m, &m, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn hd95_two_points_three_apart() {
        let p = mask([8, 3, 3], |x, y, z| x == 1 && y == 1 && z == 1);
        let g = mask([8, 3, 3], |x, y, z| x == 4 && y == 1 && z == 1);
        assert_eq!(hd95(&p, &g, [1.0; 3]).unwrap(), 3.0);
    }

    #[test]
    fn hd95_empty_mask_gets_extent_diagonal() {
        let p = mask([4, 4, 4], |_, _, _| false);
        let g = mask([4, 4, 4], |x, _, _| x == 0);
        let want = (3.0f64 * 16.0).sqrt(); // 4 mm per axis
        assert_eq!(hd95(&p, &g, [1.0; 3]).unwrap(), want);
        assert_eq!(hd95(&g, &p, [1.0; 3]).unwrap(), want);
        assert_eq!(hd95(&p, &p, [1.0; 3]).unwrap(), want);
    }

    /// All-pairs oracle for the pooled symmetric surface distances.
    fn naive_pooled(p: &Grid3<bool>, g: &Grid3<bool>, spacing: [f64; 3]) -> Vec<f64> {
        let surf = |m: &Grid3<bool>| {
            let [nx, ny, nz] = m.shape();
            let mut pts = Vec::new();
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if !m.get(x, y, z) {
                            continue;
                        }
                        let mut on_border = false;
                        for (dx, dy, dz) in
                            [(-1i32, 0i32, 0i32), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                        {
                            let (ax, ay, az) =
                                (x as i32 + dx, y as i32 + dy, z as i32 + dz);
                            if ax < 0
                                || ay < 0
                                || az < 0
                                || ax >= nx as i32
                                || ay >= ny as i32
                                || az >= nz as i32
                                || !m.get(ax as usize, ay as usize, az as usize)
                            {
                                on_border = true;
                                break;
                            }
                        }
                        if on_border {
                            pts.push([x as f64, y as f64, z as f64]);
                        }
                    }
                }
            }
            pts
        };
        let sp = surf(p);
        let sg = surf(g);
        let nearest = |a: &[f64; 3], other: &[[f64; 3]]| -> f64 {
            other
                .iter()
                .map(|b| {
                    (0..3)
                        .map(|i| ((a[i] - b[i]) * spacing[i]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        };
        let mut pooled: Vec<f64> = sp.iter().map(|a| nearest(a, &sg)).collect();
        pooled.extend(sg.iter().map(|b| nearest(b, &sp)));
        pooled
    }

    fn naive_percentile(values: &[f64], q: f64) -> f64 {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = q / 100.0 * (s.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
    }

    #[test]
    fn hd95_matches_all_pairs_oracle_on_random_masks() {
        let mut r = rng::stream(13, "test.metrics", 3);
        let mut ran = 0;
        while ran < 25 {
            let p = mask([10, 9, 8], |_, _, _| r.gen_bool(0.2));
            let g = mask([10, 9, 8], |_, _, _| r.gen_bool(0.2));
            if !p.data().iter().any(|&b| b) || !g.data().iter().any(|&b| b) {
                continue;
            }
            ran += 1;
            let spacing = [0.5, 1.0, 2.0];
            let fast = hd95(&p, &g, spacing).unwrap();
            let slow = naive_percentile(&naive_pooled(&p, &g, spacing), 95.0);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
            // Symmetric because the pool is.
            let swapped = hd95(&g, &p, spacing).unwrap();
            assert!((fast - swapped).abs() < 1e-9);
        }
    }

    // -- nsd -----------------------------------------------------------------

    #[test]
    fn nsd_identical_masks_is_one() {
        let m = mask([8, 8, 8], |x, y, z| x >= 2 && y >= 3 && z < 5);
        assert_eq!(nsd(&m, &m, 1.0, [1.0; 3]).unwrap(), 1.0);
    }

    #[test]
    fn nsd_parallel_slabs_two_mm_apart() {
        // Slabs at x=1 and x=4, spacing 1 mm: single-voxel-thick slabs are
        // all border; every surface point is exactly 3 mm from the opposing
        // surface, so nothing is within tau = 1.
        let p = mask([8, 4, 4], |x, _, _| x == 1);
        let g = mask([8, 4, 4], |x, _, _| x == 4);
        assert_eq!(nsd(&p, &g, 1.0, [1.0; 3]).unwrap(), 0.0);
        // At 2 mm separation and tau = 2 every point qualifies.
        let g2 = mask([8, 4, 4], |x, _, _| x == 3);
        assert_eq!(nsd(&p, &g2, 2.0, [1.0; 3]).unwrap(), 1.0);
    }

    #[test]
    fn nsd_empty_mask_conventions() {
        let e = mask([4, 4, 4], |_, _, _| false);
        let m = mask([4, 4, 4], |x, _, _| x == 2);
        assert_eq!(nsd(&e, &e, 1.0, [1.0; 3]).unwrap(), 1.0);
        assert_eq!(nsd(&e, &m, 1.0, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(nsd(&m, &e, 1.0, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn nsd_matches_all_pairs_oracle_exactly() {
        let mut r = rng::stream(14, "test.metrics", 4);
        let mut ran = 0;
        while ran < 25 {
            let p = mask([9, 8, 7], |_, _, _| r.gen_bool(0.25));
            let g = mask([9, 8, 7], |_, _, _| r.gen_bool(0.25));
            if !p.data().iter().any(|&b| b) || !g.data().iter().any(|&b| b) {
                continue;
            }
            ran += 1;
            let spacing = [1.0, 1.0, 1.0];
            let tau = 1.0; // knife-edge: voxel neighbors sit at exactly 1 mm
            let fast = nsd(&p, &g, tau, spacing).unwrap();
            let pooled = naive_pooled(&p, &g, spacing);
            let within = pooled.iter().filter(|&&d| d * d <= tau * tau).count();
            let slow = within as f64 / pooled.len() as f64;
            assert_eq!(fast, slow);
        }
    }

    // -- reports ---------------------------------------------------------------

    #[test]
    fn report_summary_means_and_jsonl_layout() {
        let m = StructureMetrics {
            dsc: 80.0,
            jaccard: 66.0,
            nsd: 0.9,
            hd95: 2.0,
        };
        let m2 = StructureMetrics {
            dsc: 90.0,
            jaccard: 82.0,
            nsd: 1.0,
            hd95: 1.0,
        };
        let report = MetricsReport::new(
            "abc123".into(),
            7,
            "ckpt_best".into(),
            vec![
                CaseRecord {
                    case_id: "c0".into(),
                    structure: "artery".into(),
                    metrics: m,
                },
                CaseRecord {
                    case_id: "c1".into(),
                    structure: "artery".into(),
                    metrics: m2,
                },
                CaseRecord {
                    case_id: "c0".into(),
                    structure: "vein".into(),
                    metrics: m2,
                },
            ],
        );
        let artery = &report.summary["artery"];
        assert_eq!(artery.dsc, 85.0);
        assert_eq!(artery.hd95, 1.5);
        assert_eq!(report.summary["vein"].dsc, 90.0);

        let text = report.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5); // 3 cases + 2 summaries
        assert!(lines[0].contains("\"record\":\"case\""));
        assert!(lines[3].contains("\"record\":\"summary\""));
        assert!(lines[3].contains("\"config_hash\":\"abc123\""));
        // Stable ordering: repeated serialization is identical.
        assert_eq!(text, report.to_jsonl());
    }
}
