//! Dense 3D grids with voxel-spacing metadata: CT volumes and label maps.

use crate::error::{Error, Result};

/// Dense 3D grid stored x-fastest (index `x + nx*(y + ny*z)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy + Default> Grid3<T> {
    pub fn new(shape: [usize; 3]) -> Self {
        Grid3 {
            shape,
            data: vec![T::default(); shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != shape[0] * shape[1] * shape[2] {
            return Err(Error::ShapeMismatch(format!(
                "grid of shape {:?} needs {} elements, got {}",
                shape,
                shape[0] * shape[1] * shape[2],
                data.len()
            )));
        }
        Ok(Grid3 { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Grid3 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.shape[0] && y < self.shape[1] && z < self.shape[2]);
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Input-channel semantics of a [`Volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelTag {
    /// Raw CT intensities in Hounsfield units.
    RawHu,
    /// Window-normalized intensities in [0, 1].
    Normalized,
    /// Curvature channel derived from intensity second derivatives.
    HessianEig,
}

impl ChannelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelTag::RawHu => "raw_hu",
            ChannelTag::Normalized => "normalized",
            ChannelTag::HessianEig => "hessian_eig",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw_hu" => Some(ChannelTag::RawHu),
            "normalized" => Some(ChannelTag::Normalized),
            "hessian_eig" => Some(ChannelTag::HessianEig),
            _ => None,
        }
    }
}

/// Label scheme: artery/vein only, or side-split into four foreground classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelScheme {
    /// 0 = background, 1 = artery, 2 = vein.
    ThreeClass,
    /// 0 = background, 1/2 = left artery/vein, 3/4 = right artery/vein.
    FiveClass,
}

impl LabelScheme {
    pub fn class_count(self) -> usize {
        match self {
            LabelScheme::ThreeClass => 3,
            LabelScheme::FiveClass => 5,
        }
    }

    /// Number of foreground classes (excludes background).
    pub fn foreground_count(self) -> usize {
        self.class_count() - 1
    }

    pub fn max_label(self) -> u8 {
        (self.class_count() - 1) as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelScheme::ThreeClass => "three_class",
            LabelScheme::FiveClass => "five_class",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "three_class" => Some(LabelScheme::ThreeClass),
            "five_class" => Some(LabelScheme::FiveClass),
            _ => None,
        }
    }
}

/// A scalar 3D image with physical metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Grid3<f32>,
    /// Voxel spacing in mm along (x, y, z).
    pub spacing: [f32; 3],
    /// Physical offset of voxel (0,0,0) in mm.
    pub origin: [f32; 3],
    pub channel_tag: ChannelTag,
}

impl Volume {
    pub fn new(
        data: Grid3<f32>,
        spacing: [f32; 3],
        origin: [f32; 3],
        channel_tag: ChannelTag,
    ) -> Result<Self> {
        let v = Volume {
            data,
            spacing,
            origin,
            channel_tag,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.data.shape();
        if s.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("volume has empty dimension: {s:?}")));
        }
        if self.spacing.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid(format!(
                "non-positive spacing {:?}",
                self.spacing
            )));
        }
        if self.channel_tag == ChannelTag::Normalized {
            for &v in self.data.data() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!(
                        "normalized volume carries out-of-range value {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }
}

/// A dense 3D map of integer class IDs paired with a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub data: Grid3<u8>,
    pub scheme: LabelScheme,
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
}

impl LabelVolume {
    pub fn new(
        data: Grid3<u8>,
        scheme: LabelScheme,
        spacing: [f32; 3],
        origin: [f32; 3],
    ) -> Result<Self> {
        let l = LabelVolume {
            data,
            scheme,
            spacing,
            origin,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        let max = self.scheme.max_label();
        for &v in self.data.data() {
            if v > max {
                return Err(Error::invalid(format!(
                    "label {v} out of range for {}",
                    self.scheme.as_str()
                )));
            }
        }
        if self.spacing.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid(format!(
                "non-positive spacing {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }

    /// Binary mask of voxels equal to `class`.
    pub fn class_mask(&self, class: u8) -> Grid3<bool> {
        self.data.map(|v| v == class)
    }
}
