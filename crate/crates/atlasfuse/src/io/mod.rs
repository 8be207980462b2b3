//! Volume files, dispatched on extension: `.nii`, `.nii.gz`, `.mvol.json`.

pub mod mvol;
pub mod nifti;

use std::path::Path;

use atlasfuse_core::{LabelMask, ProbMask, Volume};

use crate::error::{Error, Result};
use mvol::MvolData;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Nifti,
    Mvol,
}

pub fn format_of(path: &Path) -> Result<Format> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Format::Nifti)
    } else if name.ends_with(".mvol.json") {
        Ok(Format::Mvol)
    } else {
        Err(Error::Unsupported(path.into(), "expected .nii, .nii.gz or .mvol.json".into()))
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match format_of(path)? {
        Format::Nifti => nifti::read_nifti(path)?.to_volume(),
        Format::Mvol => match mvol::read_mvol(path)? {
            (g, MvolData::F32(d)) => Ok(Volume::new(g, d)?),
            (g, MvolData::U16(d)) => Ok(Volume::new(g, d.into_iter().map(f32::from).collect())?),
        },
    }
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    match format_of(path)? {
        Format::Nifti => nifti::read_nifti(path)?.to_mask(path),
        Format::Mvol => match mvol::read_mvol(path)? {
            (g, MvolData::U16(d)) => Ok(LabelMask::new(g, d)?),
            (g, MvolData::F32(d)) => {
                let img = nifti::NiftiImage { geometry: g, datatype: nifti::DT_FLOAT32, data: d.into_iter().map(f64::from).collect() };
                img.to_mask(path)
            }
        },
    }
}

/// Reads probabilities; integer label files are read as 0/1 foreground.
pub fn read_prob(path: &Path) -> Result<ProbMask> {
    let (g, data) = match format_of(path)? {
        Format::Nifti => {
            let img = nifti::read_nifti(path)?;
            let float = matches!(img.datatype, nifti::DT_FLOAT32 | nifti::DT_FLOAT64);
            (img.geometry, img.data.iter().map(|&v| if float { v as f32 } else { f32::from(u8::from(v != 0.0)) }).collect())
        }
        Format::Mvol => match mvol::read_mvol(path)? {
            (g, MvolData::F32(d)) => (g, d),
            (g, MvolData::U16(d)) => (g, d.into_iter().map(|v| f32::from(u8::from(v != 0))).collect()),
        },
    };
    Ok(ProbMask::new(g, data)?)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    match format_of(path)? {
        Format::Nifti => nifti::write_nifti_volume(v, path),
        Format::Mvol => mvol::write_mvol_volume(v, path),
    }
}

pub fn write_mask(m: &LabelMask, path: &Path) -> Result<()> {
    match format_of(path)? {
        Format::Nifti => nifti::write_nifti_mask(m, path),
        Format::Mvol => mvol::write_mvol_mask(m, path),
    }
}

pub fn write_prob(p: &ProbMask, path: &Path) -> Result<()> {
    match format_of(path)? {
        Format::Nifti => nifti::write_nifti_volume(&p.to_volume(), path),
        Format::Mvol => mvol::write_mvol_prob(p, path),
    }
}
