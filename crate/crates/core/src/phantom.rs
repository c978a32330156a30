//! Synthetic vascular phantoms: paired raw-HU volumes and five-class labels
//! with branching tube trees, so the whole pipeline can be exercised and
//! trained without any real CT data.
//!
//! Each phantom grows four tube trees — left artery (1), left vein (2),
//! right artery (3), right vein (4) — by recursive binary branching. Left
//! structures live strictly at `x < midplane`, right structures at
//! `x ≥ midplane`. The background carries a gentle left-to-right intensity
//! ramp (so sidedness is visible in intensities, as patient anatomy makes it
//! in real scans), plus optional dark airway-like distractor tubes and
//! Gaussian noise everywhere.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::manifest::{Labeling, Manifest, ManifestEntry};
use crate::nifti;
use crate::rng;
use crate::volume::{ChannelTag, Grid3, LabelScheme, LabelVolume, Volume};

/// Hounsfield range accepted for phantom intensities.
const HU_MIN: f32 = -1024.0;
const HU_MAX: f32 = 3071.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    /// Root tubes grown per structure (0 = empty phantom).
    pub tubes_per_structure: usize,
    /// Root radius range in voxels; children shrink by 0.8 per generation.
    pub radius_range: (f64, f64),
    /// Binary branching generations below the root.
    pub branch_depth: usize,
    pub artery_hu: (f32, f32),
    pub vein_hu: (f32, f32),
    /// Background ramp: HU at x = 0 → HU at x = nx−1.
    pub background_hu: (f32, f32),
    pub airway_hu: (f32, f32),
    /// Dark distractor tubes that carry no label.
    pub airway_count: usize,
    pub noise_std: f32,
    pub spacing: [f32; 3],
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [48, 48, 48],
            tubes_per_structure: 1,
            radius_range: (1.6, 2.4),
            branch_depth: 2,
            // Artery and vein overlap but keep distinct means; both sit far
            // above the lung-like background.
            artery_hu: (-10.0, 90.0),
            vein_hu: (-90.0, 10.0),
            background_hu: (-680.0, -520.0),
            airway_hu: (-950.0, -850.0),
            airway_count: 2,
            noise_std: 15.0,
            spacing: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius_range.0 < 1.0 || self.radius_range.1 < self.radius_range.0 {
            return Err(Error::invalid(format!(
                "bad radius range {:?} (need 1 ≤ lo ≤ hi)",
                self.radius_range
            )));
        }
        for (name, (lo, hi)) in [
            ("artery", self.artery_hu),
            ("vein", self.vein_hu),
            ("background", self.background_hu),
            ("airway", self.airway_hu),
        ] {
            if !(HU_MIN..=HU_MAX).contains(&lo) || !(HU_MIN..=HU_MAX).contains(&hi) {
                return Err(Error::invalid(format!(
                    "{name} intensity range ({lo}, {hi}) leaves plausible HU"
                )));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::invalid("negative noise_std"));
        }
        let min_dim = self.shape.iter().copied().min().unwrap_or(0);
        let need = (4.0 * self.radius_range.1).ceil() as usize;
        if min_dim < need {
            return Err(Error::invalid(format!(
                "shape {:?} too small for root radius {} (need ≥ {need} per axis)",
                self.shape, self.radius_range.1
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: V3, b: V3, s: f64) -> V3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [a[0] / n, a[1] / n, a[2] / n]
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: V3,
    b: V3,
    radius: f64,
}

/// Visit every voxel whose center lies within `radius` of the open segment
/// `a..b` (perpendicular distance, projection clamped to the segment — no
/// spherical end caps).
pub fn rasterize_segment(
    shape: [usize; 3],
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    mut visit: impl FnMut(usize, usize, usize),
) {
    let ab = sub(b, a);
    let len_sq = dot(ab, ab);
    let r_sq = radius * radius;
    let lo = |i: usize| (a[i].min(b[i]) - radius).floor().max(0.0) as usize;
    let hi = |i: usize| {
        ((a[i].max(b[i]) + radius).ceil() as usize).min(shape[i].saturating_sub(1))
    };
    for z in lo(2)..=hi(2).min(shape[2] - 1) {
        for y in lo(1)..=hi(1).min(shape[1] - 1) {
            for x in lo(0)..=hi(0).min(shape[0] - 1) {
                let p = [x as f64, y as f64, z as f64];
                let t = if len_sq == 0.0 {
                    0.0
                } else {
                    (dot(sub(p, a), ab) / len_sq).clamp(0.0, 1.0)
                };
                // Reject beyond the endpoints: no caps.
                if len_sq > 0.0 {
                    let raw_t = dot(sub(p, a), ab) / len_sq;
                    if !(0.0..=1.0).contains(&raw_t) {
                        continue;
                    }
                }
                let closest = add_scaled(a, ab, t);
                let d = sub(p, closest);
                if dot(d, d) <= r_sq {
                    visit(x, y, z);
                }
            }
        }
    }
}

/// Unit direction nudged by a random perturbation of magnitude ≤ `jitter`.
fn jitter_dir(dir: V3, jitter: f64, rng: &mut ChaCha20Rng) -> V3 {
    let bump = [
        rng.gen_range(-jitter..=jitter),
        rng.gen_range(-jitter..=jitter),
        rng.gen_range(-jitter..=jitter),
    ];
    normalize([dir[0] + bump[0], dir[1] + bump[1], dir[2] + bump[2]])
}

fn grow_tree(
    start: V3,
    dir: V3,
    length: f64,
    radius: f64,
    depth: usize,
    rng: &mut ChaCha20Rng,
    out: &mut Vec<Segment>,
) {
    let end = add_scaled(start, dir, length);
    out.push(Segment { a: start, b: end, radius });
    if depth == 0 || radius * 0.8 < 0.8 {
        return;
    }
    for _ in 0..2 {
        let child_dir = jitter_dir(dir, 0.6, rng);
        grow_tree(end, child_dir, length * 0.75, radius * 0.8, depth - 1, rng, out);
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Which x range a structure may occupy: left of the midplane or from it on.
fn side_of_class(class: u8) -> bool {
    class == 1 || class == 2 // true = left
}

/// Generate one phantom: a raw-HU volume and its five-class labels.
/// Bit-identical for the same config (including seed).
pub fn generate_phantom(c: &PhantomConfig) -> Result<(Volume, LabelVolume)> {
    c.validate()?;
    let [nx, ny, nz] = c.shape;
    let mid = nx / 2;

    // Background ramp.
    let (bg_lo, bg_hi) = c.background_hu;
    let ramp = |x: usize| {
        bg_lo + (bg_hi - bg_lo) * x as f32 / (nx.max(2) - 1) as f32
    };
    let mut intensity = Grid3::from_fn(c.shape, |x, _, _| ramp(x));
    let mut labels = Grid3::<u8>::new(c.shape);

    let mut geo = rng::stream(c.seed, "phantom.geometry", 0);

    // Airway-like distractors: dark tubes anywhere, no labels.
    for _ in 0..c.airway_count {
        let r = geo.gen_range(c.radius_range.0..=c.radius_range.1);
        let start = [
            geo.gen_range(r + 1.0..nx as f64 - r - 1.0),
            geo.gen_range(r + 1.0..ny as f64 - r - 1.0),
            geo.gen_range(0.0..nz as f64 * 0.3),
        ];
        let dir = jitter_dir([0.0, 0.0, 1.0], 0.5, &mut geo);
        let len = nz as f64 * geo.gen_range(0.4..0.7);
        let hu = geo.gen_range(c.airway_hu.0..=c.airway_hu.1);
        let mut segs = Vec::new();
        grow_tree(start, dir, len, r, 0, &mut geo, &mut segs);
        for s in &segs {
            rasterize_segment(c.shape, s.a, s.b, s.radius, |x, y, z| {
                intensity.set(x, y, z, hu);
            });
        }
    }

    // Four labeled structures.
    for class in 1u8..=4 {
        let left = side_of_class(class);
        let (hu_lo, hu_hi) = if class == 1 || class == 3 { c.artery_hu } else { c.vein_hu };
        for _ in 0..c.tubes_per_structure {
            let r = geo.gen_range(c.radius_range.0..=c.radius_range.1);
            // Roots fit inside their side with a radius margin.
            let (x_lo, x_hi) = if left {
                (r + 1.0, (mid as f64 - r - 1.0).max(r + 1.5))
            } else {
                ((mid as f64 + r + 1.0).min(nx as f64 - r - 1.5), nx as f64 - r - 1.0)
            };
            let start = [
                geo.gen_range(x_lo..x_hi.max(x_lo + 0.1)),
                geo.gen_range(r + 1.0..ny as f64 - r - 1.0),
                geo.gen_range(1.0..nz as f64 * 0.25),
            ];
            let dir = jitter_dir([0.0, 0.0, 1.0], 0.4, &mut geo);
            let len = nz as f64 * geo.gen_range(0.3..0.45);
            let mut segs = Vec::new();
            grow_tree(start, dir, len, r, c.branch_depth, &mut geo, &mut segs);
            for s in &segs {
                let hu = geo.gen_range(hu_lo..=hu_hi);
                rasterize_segment(c.shape, s.a, s.b, s.radius, |x, y, z| {
                    // Hard side clip keeps the sidedness invariant exact.
                    if (x < mid) == left {
                        intensity.set(x, y, z, hu);
                        labels.set(x, y, z, class);
                    }
                });
            }
        }
    }

    // Noise over everything, drawn in canonical voxel order.
    if c.noise_std > 0.0 {
        let mut noise_rng = rng::stream(c.seed, "phantom.noise", 0);
        let normal = Normal::new(0.0f64, c.noise_std as f64).unwrap();
        for v in intensity.data_mut() {
            *v = (*v + normal.sample(&mut noise_rng) as f32).clamp(HU_MIN, HU_MAX);
        }
    }

    let vol = Volume::new(intensity, c.spacing, [0.0; 3], ChannelTag::RawHu)?;
    let lab = LabelVolume::new(labels, LabelScheme::FiveClass, c.spacing, [0.0; 3])?;
    Ok((vol, lab))
}

/// Hide one side's annotations: `left = true` keeps classes {1,2} and zeroes
/// {3,4} (tag `half_left`); `left = false` is the mirror image.
pub fn make_half_labeled(l: &LabelVolume, left: bool) -> Result<(LabelVolume, Labeling)> {
    if l.scheme != LabelScheme::FiveClass {
        return Err(Error::invalid("make_half_labeled expects five_class labels"));
    }
    let keep: [u8; 2] = if left { [1, 2] } else { [3, 4] };
    let data = l.data.map(|v| if keep.contains(&v) { v } else { 0 });
    let tag = if left { Labeling::HalfLeft } else { Labeling::HalfRight };
    Ok((LabelVolume::new(data, LabelScheme::FiveClass, l.spacing, l.origin)?, tag))
}

// ---------------------------------------------------------------------------
// Dataset writer
// ---------------------------------------------------------------------------

/// Write `count` phantom cases under `dir` (`vol/` and `lab/` NIfTI pairs)
/// plus a manifest. The first `full_count` cases keep complete labels; the
/// rest alternate half_left / half_right. Per-case seeds derive from `seed`,
/// so the dataset is reproducible bit-for-bit.
pub fn write_phantom_dataset(
    dir: &Path,
    base: &PhantomConfig,
    count: usize,
    full_count: usize,
    seed: u64,
) -> Result<Manifest> {
    if full_count > count {
        return Err(Error::invalid(format!(
            "full_count {full_count} exceeds case count {count}"
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut cfg = base.clone();
        cfg.seed = rng::stream(seed, "phantom.case", i as u64).gen();
        let (vol, labels) = generate_phantom(&cfg)?;
        let (labels, labeling) = if i < full_count {
            (labels, Labeling::Full)
        } else {
            make_half_labeled(&labels, (i - full_count) % 2 == 0)?
        };
        let vol_rel = format!("vol/case_{i:04}.nii.gz");
        let lab_rel = format!("lab/case_{i:04}.nii.gz");
        nifti::write_volume(dir.join(&vol_rel), &vol)?;
        nifti::write_labels(dir.join(&lab_rel), &labels)?;
        entries.push(ManifestEntry {
            volume: vol_rel.into(),
            labels: lab_rel.into(),
            labeling,
        });
    }
    let manifest = Manifest { entries, seed: Some(seed) };
    manifest.save(dir.join("manifest.tsv"))?;
    Ok(manifest)
}
