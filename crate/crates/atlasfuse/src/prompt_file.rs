//! JSON form of a prompt. Mask prompts point at a sibling volume file.

use std::fs;
use std::path::Path;

use atlasfuse_core::prompting::{Prompt, PromptShape, VoxelBox};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PromptDoc {
    Click { context_label: u16, voxel: [usize; 3] },
    Box { context_label: u16, min: [usize; 3], max: [usize; 3] },
    SliceBox { context_label: u16, slice_index: usize, min: [usize; 3], max: [usize; 3] },
    /// `mask` is relative to the JSON file.
    Mask { context_label: u16, mask: String },
}

impl PromptDoc {
    /// `mask_file` names the file a mask prompt is (or will be) stored in.
    pub fn from_prompt(p: &Prompt, mask_file: &str) -> Self {
        let context_label = p.context_label;
        match &p.shape {
            PromptShape::Click(v) => PromptDoc::Click { context_label, voxel: *v },
            PromptShape::Box(b) => PromptDoc::Box { context_label, min: b.min, max: b.max },
            PromptShape::SliceBox { slice_index, bbox } => {
                PromptDoc::SliceBox { context_label, slice_index: *slice_index, min: bbox.min, max: bbox.max }
            }
            PromptShape::Mask(_) => PromptDoc::Mask { context_label, mask: mask_file.to_string() },
        }
    }

    pub fn to_prompt(&self, base_dir: &Path) -> Result<Prompt> {
        Ok(match self {
            PromptDoc::Click { context_label, voxel } => Prompt { context_label: *context_label, shape: PromptShape::Click(*voxel) },
            PromptDoc::Box { context_label, min, max } => {
                Prompt { context_label: *context_label, shape: PromptShape::Box(VoxelBox { min: *min, max: *max }) }
            }
            PromptDoc::SliceBox { context_label, slice_index, min, max } => Prompt {
                context_label: *context_label,
                shape: PromptShape::SliceBox { slice_index: *slice_index, bbox: VoxelBox { min: *min, max: *max } },
            },
            PromptDoc::Mask { context_label, mask } => {
                Prompt { context_label: *context_label, shape: PromptShape::Mask(io::read_mask(&base_dir.join(mask))?) }
            }
        })
    }
}

/// `p.json` -> `p.mask.mvol.json`.
pub fn mask_sibling(json_path: &Path) -> String {
    let name = json_path.file_name().and_then(|n| n.to_str()).unwrap_or("prompt.json");
    let stem = name.strip_suffix(".json").unwrap_or(name);
    format!("{stem}.mask.mvol.json")
}

pub fn write_prompt(p: &Prompt, path: &Path) -> Result<()> {
    let mask_file = mask_sibling(path);
    if let PromptShape::Mask(m) = &p.shape {
        io::write_mask(m, &path.with_file_name(&mask_file))?;
    }
    let mut text = serde_json::to_string_pretty(&PromptDoc::from_prompt(p, &mask_file)).expect("prompt serializes");
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_prompt(path: &Path) -> Result<Prompt> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let doc: PromptDoc = serde_json::from_str(&text).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
    doc.to_prompt(path.parent().unwrap_or(Path::new(".")))
}
