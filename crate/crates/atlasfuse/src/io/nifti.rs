//! Minimal single-file NIfTI-1 (`.nii`, `.nii.gz`).
//!
//! Only the voxel grid, spacing and origin are kept. Rotations in the
//! qform/sform are ignored (with a warning) because every image is
//! registered anyway.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use atlasfuse_core::{Geometry, LabelMask, Volume};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// Decoded image with scaling already applied.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub geometry: Geometry,
    pub datatype: i16,
    pub data: Vec<f64>,
}

impl NiftiImage {
    pub fn to_volume(&self) -> Result<Volume> {
        Ok(Volume::new(self.geometry, self.data.iter().map(|&v| v as f32).collect())?)
    }

    /// Fails unless every value is an integer label in `0..=u16::MAX`.
    pub fn to_mask(&self, path: &Path) -> Result<LabelMask> {
        let mut labels = Vec::with_capacity(self.data.len());
        for (i, &v) in self.data.iter().enumerate() {
            if !(v >= 0.0 && v <= f64::from(u16::MAX) && v.fract() == 0.0) {
                return Err(Error::Format(path.into(), format!("voxel {i} holds {v}, not a label")));
            }
            labels.push(v as u16);
        }
        Ok(LabelMask::new(self.geometry, labels)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().expect("in-bounds header field");
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.take(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.take(at))
    }
}

fn decompress_if_needed(raw: Vec<u8>, path: &Path) -> Result<Vec<u8>> {
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(Error::io(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let raw = fs::read(path).map_err(Error::io(path))?;
    parse_nifti(&decompress_if_needed(raw, path)?, path)
}

pub fn parse_nifti(bytes: &[u8], path: &Path) -> Result<NiftiImage> {
    let fmt = |m: &str| Error::Format(path.into(), m.to_string());
    if bytes.len() < HEADER_SIZE {
        return Err(fmt("shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(fmt("sizeof_hdr is not 348")),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(fmt("magic is not \"n+1\" (only single-file NIfTI-1 is read)"));
    }
    let c = Cursor { bytes, big_endian };
    let dim: Vec<i16> = (0..8).map(|i| c.i16(40 + 2 * i)).collect();
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(fmt("dim[0] outside 1..=7"));
    }
    if (4..=rank as usize).any(|i| dim[i] > 1) {
        return Err(Error::Unsupported(path.into(), "more than three non-singleton dimensions".into()));
    }
    let mut dims = [1usize; 3];
    for a in 0..(rank as usize).min(3) {
        if dim[a + 1] < 1 {
            return Err(fmt("non-positive dimension"));
        }
        dims[a] = dim[a + 1] as usize;
    }
    let datatype = c.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Unsupported(path.into(), format!("datatype code {other}"))),
    };
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = f64::from(c.f32(80 + 4 * a)).abs();
        if p > 0.0 {
            *s = p;
        }
    }
    let (qform_code, sform_code) = (c.i16(252), c.i16(254));
    let origin = if sform_code > 0 {
        let row = |r: usize| -> [f64; 4] { std::array::from_fn(|k| f64::from(c.f32(280 + 16 * r + 4 * k))) };
        let rows = [row(0), row(1), row(2)];
        let diagonal = (0..3).all(|r| (0..3).all(|k| r == k || rows[r][k] == 0.0));
        if !diagonal {
            log::warn!("{}: sform rotation ignored; only origin and spacing are used", path.display());
        }
        [rows[0][3], rows[1][3], rows[2][3]]
    } else if qform_code > 0 {
        let (b, cq, d) = (c.f32(256), c.f32(260), c.f32(264));
        if b != 0.0 || cq != 0.0 || d != 0.0 {
            log::warn!("{}: qform rotation ignored; only origin and spacing are used", path.display());
        }
        [f64::from(c.f32(268)), f64::from(c.f32(272)), f64::from(c.f32(276))]
    } else {
        [0.0; 3]
    };
    let offset = c.f32(108) as usize;
    let offset = offset.max(HEADER_SIZE);
    let geometry = Geometry::new(dims, spacing, origin)?;
    let n = geometry.len();
    let payload = bytes.get(offset..offset + n * width).ok_or_else(|| fmt("data shorter than the header's dimensions"))?;
    let mut data: Vec<f64> = payload
        .chunks_exact(width)
        .map(|ch| {
            let mut b = [0u8; 8];
            b[..width].copy_from_slice(ch);
            if big_endian {
                b[..width].reverse();
            }
            match datatype {
                DT_UINT8 => f64::from(b[0]),
                DT_INT16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
                DT_INT32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                DT_FLOAT32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                _ => f64::from_le_bytes(b),
            }
        })
        .collect();
    let (slope, inter) = (f64::from(c.f32(112)), f64::from(c.f32(116)));
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage { geometry, datatype, data })
}

fn header(g: &Geometry, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    let dim = [3i16, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &datatype.to_le_bytes());
    put(&mut h, 72, &bitpix.to_le_bytes());
    let pixdim = [1.0f32, g.spacing[0] as f32, g.spacing[1] as f32, g.spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(DATA_OFFSET as f32).to_le_bytes());
    // Millimetres, seconds.
    h[123] = 2 | 8;
    put(&mut h, 252, &1i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    for a in 0..3 {
        put(&mut h, 268 + 4 * a, &(g.origin[a] as f32).to_le_bytes());
        let mut row = [0.0f32; 4];
        row[a] = g.spacing[a] as f32;
        row[3] = g.origin[a] as f32;
        for (k, v) in row.iter().enumerate() {
            put(&mut h, 280 + 16 * a + 4 * k, &v.to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(Error::io(path))?;
        enc.finish().map_err(Error::io(path))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(Error::io(path))
}

fn check_dims(g: &Geometry, path: &Path) -> Result<()> {
    if g.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Unsupported(path.into(), "dimension exceeds 32767".into()));
    }
    Ok(())
}

/// Writes float32 data; spacing and origin are stored as float32 as the
/// format requires.
pub fn write_nifti_volume(v: &Volume, path: &Path) -> Result<()> {
    check_dims(v.geometry(), path)?;
    let mut bytes = header(v.geometry(), DT_FLOAT32, 32);
    bytes.reserve(v.data().len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Labels are stored as int16 when they fit, int32 otherwise.
pub fn write_nifti_mask(m: &LabelMask, path: &Path) -> Result<()> {
    check_dims(m.geometry(), path)?;
    let narrow = m.max_label() <= i16::MAX as u16;
    let mut bytes = if narrow { header(m.geometry(), DT_INT16, 16) } else { header(m.geometry(), DT_INT32, 32) };
    for &l in m.labels() {
        if narrow {
            bytes.extend_from_slice(&(l as i16).to_le_bytes());
        } else {
            bytes.extend_from_slice(&i32::from(l).to_le_bytes());
        }
    }
    write_bytes(path, &bytes)
}
