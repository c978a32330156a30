//! CT preprocessing: HU windowing, the Hessian-eigenvalue curvature channel,
//! three→five class label remapping, half-label supervision masks, and
//! foreground-biased patch sampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::{ChannelTag, Grid3, LabelScheme, LabelVolume, Volume};

/// Default CT window in Hounsfield units.
pub const HU_WINDOW: (f32, f32) = (-700.0, 300.0);

// ---------------------------------------------------------------------------
// Intensity windowing
// ---------------------------------------------------------------------------

/// Clamp raw HU intensities to `[lo, hi]` and map them affinely onto [0, 1].
///
/// Monotone non-decreasing; windowing a volume whose values already lie
/// inside the window gives the same result as windowing the original.
pub fn window_hu(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if v.channel_tag != ChannelTag::RawHu {
        return Err(Error::invalid(format!(
            "window_hu expects raw intensities, got {}",
            v.channel_tag.as_str()
        )));
    }
    if !(lo < hi) {
        return Err(Error::invalid(format!("bad window: lo {lo} must be < hi {hi}")));
    }
    let width = hi - lo;
    let data = v.data.map(|x| (x.clamp(lo, hi) - lo) / width);
    Volume::new(data, v.spacing, v.origin, ChannelTag::Normalized)
}

// ---------------------------------------------------------------------------
// Gaussian smoothing
// ---------------------------------------------------------------------------

/// Separable Gaussian blur with `sigma` in voxels and replicate boundary.
/// `sigma == 0` returns the input unchanged. Kernel radius is `ceil(3·sigma)`.
pub fn gaussian_smooth(g: &Grid3<f32>, sigma: f64) -> Grid3<f32> {
    if sigma == 0.0 {
        return g.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }

    let [nx, ny, nz] = g.shape();
    let mut cur: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
    let mut next = vec![0.0f64; cur.len()];
    // One pass per axis; replicate boundary via index clamping.
    for axis in 0..3 {
        let n = [nx, ny, nz][axis] as isize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = [x as isize, y as isize, z as isize];
                    let mut acc = 0.0;
                    for (k, &w) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let mut p = pos;
                        p[axis] = (p[axis] + off).clamp(0, n - 1);
                        let idx =
                            p[0] as usize + nx * (p[1] as usize + ny * p[2] as usize);
                        acc += w * cur[idx];
                    }
                    next[x + nx * (y + ny * z)] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Grid3::from_vec([nx, ny, nz], cur.into_iter().map(|v| v as f32).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Symmetric 3×3 eigenvalues
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric 3×3 matrix in descending order, via the
/// closed-form trigonometric solution of the characteristic cubic.
pub fn eig3_sym(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let (a11, a22, a33) = (m[0][0], m[1][1], m[2][2]);
    let (a12, a13, a23) = (m[0][1], m[0][2], m[1][2]);
    let p1 = a12 * a12 + a13 * a13 + a23 * a23;
    if p1 == 0.0 {
        let mut e = [a11, a22, a33];
        e.sort_by(|a, b| b.partial_cmp(a).unwrap());
        return e;
    }
    let q = (a11 + a22 + a33) / 3.0;
    let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    // B = (A - qI)/p has det(B)/2 in [-1, 1] up to rounding.
    let (b11, b22, b33) = ((a11 - q) / p, (a22 - q) / p, (a33 - q) / p);
    let (b12, b13, b23) = (a12 / p, a13 / p, a23 / p);
    let det_b = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13)
        + b13 * (b12 * b23 - b22 * b13);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let two_pi_3 = 2.0 * std::f64::consts::FRAC_PI_3;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + two_pi_3).cos();
    let e2 = 3.0 * q - e1 - e3;
    [e1, e2, e3]
}

/// Signed eigenvalue of largest magnitude from a descending triple.
/// Only the extremes can carry the largest magnitude; ties take the larger
/// (positive) one so the choice is deterministic.
fn largest_magnitude(e: [f64; 3]) -> f64 {
    if e[0].abs() >= e[2].abs() {
        e[0]
    } else {
        e[2]
    }
}

// ---------------------------------------------------------------------------
// Hessian curvature channel
// ---------------------------------------------------------------------------

/// Per-voxel signed largest-magnitude Hessian eigenvalue of the (optionally
/// Gaussian-smoothed) intensity field. Second derivatives use central
/// stencils in voxel units with replicate boundary.
pub fn hessian_eigen_field(g: &Grid3<f32>, sigma: f64) -> Result<Grid3<f64>> {
    let shape = g.shape();
    if shape.iter().any(|&d| d < 5) {
        return Err(Error::invalid(format!(
            "hessian stencil needs ≥5 voxels per axis, got {shape:?}"
        )));
    }
    if sigma < 0.0 {
        return Err(Error::invalid(format!("negative smoothing sigma {sigma}")));
    }
    let smoothed = gaussian_smooth(g, sigma);
    let [nx, ny, nz] = shape;
    let s = |x: isize, y: isize, z: isize| -> f64 {
        let xi = x.clamp(0, nx as isize - 1) as usize;
        let yi = y.clamp(0, ny as isize - 1) as usize;
        let zi = z.clamp(0, nz as isize - 1) as usize;
        smoothed.get(xi, yi, zi) as f64
    };
    let mut out = Grid3::<f64>::new(shape);
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let c = s(x, y, z);
                let dxx = s(x + 1, y, z) - 2.0 * c + s(x - 1, y, z);
                let dyy = s(x, y + 1, z) - 2.0 * c + s(x, y - 1, z);
                let dzz = s(x, y, z + 1) - 2.0 * c + s(x, y, z - 1);
                let dxy = (s(x + 1, y + 1, z) - s(x + 1, y - 1, z) - s(x - 1, y + 1, z)
                    + s(x - 1, y - 1, z))
                    / 4.0;
                let dxz = (s(x + 1, y, z + 1) - s(x + 1, y, z - 1) - s(x - 1, y, z + 1)
                    + s(x - 1, y, z - 1))
                    / 4.0;
                let dyz = (s(x, y + 1, z + 1) - s(x, y + 1, z - 1) - s(x, y - 1, z + 1)
                    + s(x, y - 1, z - 1))
                    / 4.0;
                let h = [[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]];
                out.set(x as usize, y as usize, z as usize, largest_magnitude(eig3_sym(&h)));
            }
        }
    }
    Ok(out)
}

/// Curvature input channel: the signed largest-magnitude Hessian eigenvalue
/// map, min-max rescaled to [0, 1] over the volume (a constant map rescales
/// to all zeros).
pub fn hessian_eigen_channel(v: &Volume, sigma: f64) -> Result<Volume> {
    if v.channel_tag != ChannelTag::Normalized {
        return Err(Error::invalid(
            "hessian_eigen_channel expects a window-normalized volume",
        ));
    }
    let field = hessian_eigen_field(&v.data, sigma)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in field.data() {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let span = hi - lo;
    let data = if span > 0.0 {
        field.map(|x| (((x - lo) / span) as f32).clamp(0.0, 1.0))
    } else {
        field.map(|_| 0.0f32)
    };
    Volume::new(data, v.spacing, v.origin, ChannelTag::HessianEig)
}

// ---------------------------------------------------------------------------
// Left/right side assignment
// ---------------------------------------------------------------------------

/// Assigns each voxel to the left or right body side.
#[derive(Debug, Clone, PartialEq)]
pub enum SideSplit {
    /// Voxels with `x < plane` are left.
    Plane(usize),
    /// Explicit per-voxel map, `true` = left.
    Map(Grid3<bool>),
}

impl SideSplit {
    /// Sagittal midplane of a volume shape.
    pub fn midplane(shape: [usize; 3]) -> Self {
        SideSplit::Plane(shape[0] / 2)
    }

    pub fn is_left(&self, x: usize, y: usize, z: usize) -> bool {
        match self {
            SideSplit::Plane(p) => x < *p,
            SideSplit::Map(m) => m.get(x, y, z),
        }
    }

    fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        if let SideSplit::Map(m) = self {
            if m.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "side map shape {:?} vs volume {:?}",
                    m.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Label remapping
// ---------------------------------------------------------------------------

/// Split artery/vein labels by body side: artery → 1 (left) / 3 (right),
/// vein → 2 (left) / 4 (right). Background stays 0.
pub fn remap_labels(l: &LabelVolume, side: &SideSplit) -> Result<LabelVolume> {
    if l.scheme != LabelScheme::ThreeClass {
        return Err(Error::invalid("remap_labels expects three_class input"));
    }
    side.check_shape(l.shape())?;
    let [nx, ny, nz] = l.shape();
    let mut out = Grid3::<u8>::new(l.shape());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = l.data.get(x, y, z);
                let mapped = match (v, side.is_left(x, y, z)) {
                    (0, _) => 0,
                    (1, true) => 1,
                    (1, false) => 3,
                    (2, true) => 2,
                    (2, false) => 4,
                    _ => unreachable!("validated three_class labels"),
                };
                out.set(x, y, z, mapped);
            }
        }
    }
    LabelVolume::new(out, LabelScheme::FiveClass, l.spacing, l.origin)
}

/// Merge side-split labels back to artery/vein: {1,3} → 1, {2,4} → 2.
pub fn collapse_labels(l: &LabelVolume) -> Result<LabelVolume> {
    if l.scheme != LabelScheme::FiveClass {
        return Err(Error::invalid("collapse_labels expects five_class input"));
    }
    let data = l.data.map(|v| match v {
        0 => 0,
        1 | 3 => 1,
        2 | 4 => 2,
        _ => unreachable!("validated five_class labels"),
    });
    LabelVolume::new(data, LabelScheme::ThreeClass, l.spacing, l.origin)
}

// ---------------------------------------------------------------------------
// Supervision masks
// ---------------------------------------------------------------------------

use crate::manifest::Labeling;

/// Which foreground classes and which voxels a case supervises.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionMask {
    /// Sorted foreground class IDs (five_class scheme: 1..=4) that carry loss.
    pub supervised_classes: Vec<u8>,
    /// Spatial restriction of the loss; `None` means the whole volume.
    pub spatial_mask: Option<Grid3<bool>>,
}

impl SupervisionMask {
    pub fn full() -> Self {
        SupervisionMask {
            supervised_classes: vec![1, 2, 3, 4],
            spatial_mask: None,
        }
    }

    pub fn is_supervised(&self, class: u8) -> bool {
        self.supervised_classes.contains(&class)
    }

    /// Reduce five_class supervision to artery/vein classes {1, 2}: any
    /// supervised side keeps its structure supervised, the spatial mask is
    /// unchanged. Used by the three_class ablation.
    pub fn collapse_to_three_class(&self) -> SupervisionMask {
        let mut classes: Vec<u8> = self
            .supervised_classes
            .iter()
            .map(|&c| if c == 1 || c == 3 { 1 } else { 2 })
            .collect();
        classes.sort_unstable();
        classes.dedup();
        SupervisionMask {
            supervised_classes: classes,
            spatial_mask: self.spatial_mask.clone(),
        }
    }
}

/// Supervision for a case with the given annotation extent. Half-labeled
/// cases supervise only that side's classes inside that side's voxels.
pub fn supervision_mask(
    labeling: Labeling,
    shape: [usize; 3],
    side: &SideSplit,
) -> Result<SupervisionMask> {
    side.check_shape(shape)?;
    match labeling {
        Labeling::Full => Ok(SupervisionMask::full()),
        Labeling::HalfLeft | Labeling::HalfRight => {
            let want_left = labeling == Labeling::HalfLeft;
            let mask = Grid3::from_fn(shape, |x, y, z| side.is_left(x, y, z) == want_left);
            Ok(SupervisionMask {
                supervised_classes: if want_left { vec![1, 2] } else { vec![3, 4] },
                spatial_mask: Some(mask),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

/// One training example: image channels, labels, and supervision cropped to
/// a common window.
#[derive(Debug, Clone)]
pub struct Patch {
    /// Input channels (normalized CT, optional curvature channel), all of
    /// the configured patch shape.
    pub channels: Vec<Grid3<f32>>,
    pub labels: Grid3<u8>,
    pub scheme: LabelScheme,
    pub mask: SupervisionMask,
    /// Identifier of the source case.
    pub source: String,
    /// Voxel corner of the crop in source coordinates (may be negative when
    /// the source is smaller than the patch and zero padding applies).
    pub corner: [isize; 3],
}

fn crop_with<T: Copy + Default>(
    src: &Grid3<T>,
    corner: [isize; 3],
    size: [usize; 3],
    fill: T,
) -> Grid3<T> {
    let [nx, ny, nz] = src.shape();
    Grid3::from_fn(size, |x, y, z| {
        let sx = corner[0] + x as isize;
        let sy = corner[1] + y as isize;
        let sz = corner[2] + z as isize;
        if sx < 0 || sy < 0 || sz < 0 || sx >= nx as isize || sy >= ny as isize || sz >= nz as isize
        {
            fill
        } else {
            src.get(sx as usize, sy as usize, sz as usize)
        }
    })
}

/// Sample one patch. With probability `fg_bias` the patch is centered on a
/// uniformly chosen foreground voxel (when any exists), otherwise on a
/// uniformly chosen voxel. The corner is clamped so the patch stays inside
/// the volume wherever it fits; smaller volumes are zero padded (labels pad
/// with background, the spatial mask pads unsupervised).
pub fn sample_patch(
    channels: &[Grid3<f32>],
    labels: &LabelVolume,
    mask: &SupervisionMask,
    size: [usize; 3],
    fg_bias: f64,
    rng: &mut impl Rng,
    source: &str,
) -> Result<Patch> {
    if size.iter().any(|&s| s == 0) {
        return Err(Error::invalid("patch size must be positive"));
    }
    if !(0.0..=1.0).contains(&fg_bias) {
        return Err(Error::invalid(format!("fg_bias {fg_bias} outside [0,1]")));
    }
    let shape = labels.shape();
    for c in channels {
        if c.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "channel shape {:?} vs labels {:?}",
                c.shape(),
                shape
            )));
        }
    }
    if let Some(m) = &mask.spatial_mask {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch("spatial mask shape mismatch".into()));
        }
    }

    // Draw order is fixed (coin, then center) so a seeded stream replays.
    let want_fg = rng.gen::<f64>() < fg_bias;
    let n = labels.data.len();
    let center_idx = if want_fg {
        let fg: Vec<usize> = (0..n).filter(|&i| labels.data.data()[i] > 0).collect();
        if fg.is_empty() {
            rng.gen_range(0..n)
        } else {
            fg[rng.gen_range(0..fg.len())]
        }
    } else {
        rng.gen_range(0..n)
    };
    let [nx, ny, _] = shape;
    let center = [
        center_idx % nx,
        (center_idx / nx) % ny,
        center_idx / (nx * ny),
    ];

    let mut corner = [0isize; 3];
    for a in 0..3 {
        let want = center[a] as isize - size[a] as isize / 2;
        let max_corner = shape[a] as isize - size[a] as isize; // may be negative
        corner[a] = want.clamp(max_corner.min(0), max_corner.max(0));
    }

    let cropped_mask = SupervisionMask {
        supervised_classes: mask.supervised_classes.clone(),
        spatial_mask: mask
            .spatial_mask
            .as_ref()
            .map(|m| crop_with(m, corner, size, false)),
    };
    Ok(Patch {
        channels: channels.iter().map(|c| crop_with(c, corner, size, 0.0)).collect(),
        labels: crop_with(&labels.data, corner, size, 0),
        scheme: labels.scheme,
        mask: cropped_mask,
        source: source.to_string(),
        corner,
    })
}
