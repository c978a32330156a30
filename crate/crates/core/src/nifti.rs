//! Minimal NIfTI-1 I/O: single-file `.nii` / `.nii.gz`, little-endian,
//! float32 image volumes and uint8 label volumes.
//!
//! The header is the fixed 348-byte NIfTI-1 layout with `vox_offset = 352`
//! (header + empty extension flag). Spacing lives in `pixdim`, the origin in
//! the `srow_*` affine (sform code 1, axis-aligned), and the channel tag or
//! label scheme in `intent_name` so a file round-trips its own semantics.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{ChannelTag, Grid3, LabelScheme, LabelVolume, Volume};

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;
const UNITS_MM: u8 = 2;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn build_header(
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    datatype: i16,
    bitpix: i16,
    intent_name: &str,
) -> Result<[u8; HEADER_LEN]> {
    for &d in &shape {
        if d == 0 || d > i16::MAX as usize {
            return Err(Error::invalid(format!(
                "dimension {d} not representable in a NIfTI-1 header"
            )));
        }
    }
    let mut h = [0u8; HEADER_LEN];
    put_i32(&mut h, 0, HEADER_LEN as i32);
    // dim[8] at offset 40: rank then extents.
    put_i16(&mut h, 40, 3);
    put_i16(&mut h, 42, shape[0] as i16);
    put_i16(&mut h, 44, shape[1] as i16);
    put_i16(&mut h, 46, shape[2] as i16);
    for k in 4..8 {
        put_i16(&mut h, 40 + 2 * k, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    // pixdim[8] at offset 76; pixdim[0] is the qfac, unused here.
    put_f32(&mut h, 76, 1.0);
    put_f32(&mut h, 80, spacing[0]);
    put_f32(&mut h, 84, spacing[1]);
    put_f32(&mut h, 88, spacing[2]);
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[123] = UNITS_MM;
    put_i16(&mut h, 252, 0); // qform_code: unused
    put_i16(&mut h, 254, 1); // sform_code: scanner-anatomical
    // Axis-aligned affine rows at offset 280.
    put_f32(&mut h, 280, spacing[0]);
    put_f32(&mut h, 292, origin[0]);
    put_f32(&mut h, 300, spacing[1]);
    put_f32(&mut h, 308, origin[1]);
    put_f32(&mut h, 320, spacing[2]);
    put_f32(&mut h, 324, origin[2]);
    let name = intent_name.as_bytes();
    if name.len() > 16 {
        return Err(Error::invalid(format!(
            "intent name {intent_name:?} exceeds 16 bytes"
        )));
    }
    h[328..328 + name.len()].copy_from_slice(name);
    h[344..348].copy_from_slice(MAGIC);
    Ok(h)
}

struct ParsedHeader {
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    intent_name: String,
}

fn parse_header(path: &Path, raw: &[u8]) -> Result<ParsedHeader> {
    if raw.len() < HEADER_LEN {
        return Err(Error::bad_file(path, "file shorter than a NIfTI-1 header"));
    }
    let sizeof_hdr = get_i32(raw, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        // 348 byte-swapped; we only write and read little-endian files.
        if sizeof_hdr.swap_bytes() == HEADER_LEN as i32 {
            return Err(Error::bad_file(path, "big-endian NIfTI is not supported"));
        }
        return Err(Error::bad_file(path, "not a NIfTI-1 file (bad sizeof_hdr)"));
    }
    if &raw[344..348] != MAGIC {
        return Err(Error::bad_file(path, "bad magic (expected single-file n+1)"));
    }
    let ndim = get_i16(raw, 40);
    if !(1..=3).contains(&ndim) {
        // Accept trailing singleton dims (rank up to 7, extras must be 1).
        if !(4..=7).contains(&ndim) {
            return Err(Error::bad_file(path, format!("unsupported rank {ndim}")));
        }
        for k in 4..=ndim as usize {
            if get_i16(raw, 40 + 2 * k) != 1 {
                return Err(Error::bad_file(
                    path,
                    format!("volume has a non-singleton dimension {k}"),
                ));
            }
        }
    }
    let dim_at = |k: usize| -> Result<usize> {
        let d = if k <= ndim as usize { get_i16(raw, 40 + 2 * k) } else { 1 };
        if d < 1 {
            return Err(Error::bad_file(path, format!("non-positive dim[{k}] = {d}")));
        }
        Ok(d as usize)
    };
    let shape = [dim_at(1)?, dim_at(2)?, dim_at(3)?];
    let mut spacing = [get_f32(raw, 80), get_f32(raw, 84), get_f32(raw, 88)];
    for s in &mut spacing {
        if !(*s > 0.0) || !s.is_finite() {
            *s = 1.0;
        }
    }
    let sform_code = get_i16(raw, 254);
    let origin = if sform_code > 0 {
        [get_f32(raw, 292), get_f32(raw, 308), get_f32(raw, 324)]
    } else {
        [get_f32(raw, 268), get_f32(raw, 272), get_f32(raw, 276)]
    };
    let vox_offset = get_f32(raw, 108);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 {
        return Err(Error::bad_file(path, format!("bad vox_offset {vox_offset}")));
    }
    let name_bytes = &raw[328..344];
    let name_end = name_bytes.iter().position(|&b| b == 0).unwrap_or(16);
    let intent_name = String::from_utf8_lossy(&name_bytes[..name_end]).into_owned();
    Ok(ParsedHeader {
        shape,
        spacing,
        origin,
        datatype: get_i16(raw, 70),
        vox_offset: vox_offset as usize,
        scl_slope: get_f32(raw, 112),
        scl_inter: get_f32(raw, 116),
        intent_name,
    })
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::bad_file(path, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    if is_gz(path) {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn payload<'a>(path: &Path, raw: &'a [u8], h: &ParsedHeader, elem: usize) -> Result<&'a [u8]> {
    let n = h.shape[0] * h.shape[1] * h.shape[2];
    let need = h.vox_offset + n * elem;
    if raw.len() < need {
        return Err(Error::bad_file(
            path,
            format!("truncated: need {need} bytes, file holds {}", raw.len()),
        ));
    }
    Ok(&raw[h.vox_offset..h.vox_offset + n * elem])
}

/// Write a float32 image volume (`.nii` or `.nii.gz` by extension).
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    vol.validate()?;
    let header = build_header(
        vol.shape(),
        vol.spacing,
        vol.origin,
        DT_FLOAT32,
        32,
        vol.channel_tag.as_str(),
    )?;
    let mut bytes = Vec::with_capacity(VOX_OFFSET + vol.data.len() * 4);
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_LEN]);
    for &v in vol.data.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Read a float32 image volume. The stored intent name restores the channel
/// tag; files without one are treated as raw intensities.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = read_bytes(path)?;
    let h = parse_header(path, &raw)?;
    if h.datatype != DT_FLOAT32 {
        return Err(Error::bad_file(
            path,
            format!("expected float32 voxels (datatype 16), found {}", h.datatype),
        ));
    }
    let body = payload(path, &raw, &h, 4)?;
    let rescale = h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0);
    let mut data = Vec::with_capacity(body.len() / 4);
    for c in body.chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        data.push(if rescale { v * h.scl_slope + h.scl_inter } else { v });
    }
    let grid = Grid3::from_vec(h.shape, data)?;
    let tag = ChannelTag::parse(&h.intent_name).unwrap_or(ChannelTag::RawHu);
    Volume::new(grid, h.spacing, h.origin, tag)
}

/// Write a uint8 label volume.
pub fn write_labels(path: impl AsRef<Path>, labels: &LabelVolume) -> Result<()> {
    let path = path.as_ref();
    labels.validate()?;
    let header = build_header(
        labels.shape(),
        labels.spacing,
        labels.origin,
        DT_UINT8,
        8,
        labels.scheme.as_str(),
    )?;
    let mut bytes = Vec::with_capacity(VOX_OFFSET + labels.data.len());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_LEN]);
    bytes.extend_from_slice(labels.data.data());
    write_bytes(path, &bytes)
}

/// Read a uint8 label volume. The scheme comes from the stored intent name;
/// files without one get the smallest scheme that covers their labels.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let raw = read_bytes(path)?;
    let h = parse_header(path, &raw)?;
    if h.datatype != DT_UINT8 {
        return Err(Error::bad_file(
            path,
            format!("expected uint8 labels (datatype 2), found {}", h.datatype),
        ));
    }
    if h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0) {
        return Err(Error::bad_file(path, "label volume carries intensity rescale"));
    }
    let body = payload(path, &raw, &h, 1)?;
    let grid = Grid3::from_vec(h.shape, body.to_vec())?;
    let scheme = LabelScheme::parse(&h.intent_name).unwrap_or_else(|| {
        if grid.data().iter().any(|&v| v > 2) {
            LabelScheme::FiveClass
        } else {
            LabelScheme::ThreeClass
        }
    });
    LabelVolume::new(grid, scheme, h.spacing, h.origin)
}
