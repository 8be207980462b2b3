//! MVOL: a JSON manifest next to a raw little-endian payload.
//!
//! `name.mvol.json` holds `{dims, spacing, origin, dtype, data_file}` and
//! `data_file` is resolved relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use atlasfuse_core::{Geometry, LabelMask, ProbMask, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U16,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: Dtype,
    pub data_file: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MvolData {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

/// `foo.mvol.json` -> `foo.mvol.raw`.
pub fn raw_name(manifest: &Path) -> Result<String> {
    let name = manifest.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(".json").unwrap_or(name);
    if stem.is_empty() {
        return Err(Error::Manifest(manifest.into(), "manifest path has no file name".into()));
    }
    Ok(format!("{stem}.raw"))
}

fn write(path: &Path, g: &Geometry, dtype: Dtype, payload: Vec<u8>) -> Result<()> {
    let data_file = raw_name(path)?;
    let raw_path = path.with_file_name(&data_file);
    let manifest = Manifest { dims: g.dims, spacing: g.spacing, origin: g.origin, dtype, data_file };
    fs::write(&raw_path, payload).map_err(Error::io(&raw_path))?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn write_mvol_volume(v: &Volume, path: &Path) -> Result<()> {
    write(path, v.geometry(), Dtype::F32, v.data().iter().flat_map(|x| x.to_le_bytes()).collect())
}

pub fn write_mvol_prob(p: &ProbMask, path: &Path) -> Result<()> {
    write(path, p.geometry(), Dtype::F32, p.data().iter().flat_map(|x| x.to_le_bytes()).collect())
}

pub fn write_mvol_mask(m: &LabelMask, path: &Path) -> Result<()> {
    write(path, m.geometry(), Dtype::U16, m.labels().iter().flat_map(|x| x.to_le_bytes()).collect())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
    if m.data_file.trim().is_empty() {
        return Err(Error::Manifest(path.into(), "empty data_file".into()));
    }
    Ok(m)
}

pub fn read_mvol(path: &Path) -> Result<(Geometry, MvolData)> {
    let m = read_manifest(path)?;
    let g = Geometry::new(m.dims, m.spacing, m.origin).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
    let raw_path: PathBuf = path.parent().unwrap_or(Path::new(".")).join(&m.data_file);
    let bytes = fs::read(&raw_path).map_err(Error::io(&raw_path))?;
    let expected = g.len() * m.dtype.width();
    if bytes.len() != expected {
        return Err(Error::Format(
            raw_path,
            format!("{} bytes of payload, {} expected for {:?} as {:?}", bytes.len(), expected, g.dims, m.dtype),
        ));
    }
    let data = match m.dtype {
        Dtype::F32 => MvolData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        Dtype::U16 => MvolData::U16(bytes.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok((g, data))
}
