//! Prompts derived from a warped atlas label: a click at the center of the
//! largest component, the bounding box of the whole mask, the box of the
//! middle axial slice, or the mask itself.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Connectivity {
    #[cfg_attr(feature = "serde", serde(rename = "6"))]
    Six,
    #[default]
    #[cfg_attr(feature = "serde", serde(rename = "26"))]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }
}

/// Calls `f` for every in-grid neighbour of `idx`, in a fixed order.
#[inline]
pub(crate) fn for_each_neighbor(g: &Geometry, idx: usize, conn: Connectivity, mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = g.dims;
    let [i, j, k] = g.coords(idx);
    for dk in -1i64..=1 {
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                let manhattan = di.abs() + dj.abs() + dk.abs();
                if manhattan == 0 || (conn == Connectivity::Six && manhattan > 1) {
                    continue;
                }
                let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                f(g.index(a as usize, b as usize, c as usize));
            }
        }
    }
}

/// Labeling of the non-zero voxels of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Per voxel: 0 for background, otherwise the 1-based component id.
    pub labels: Vec<u32>,
    /// `sizes[id - 1]`; non-increasing.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Linear indices of the voxels in component `id`, ascending.
    pub fn voxels(&self, id: u32) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == id).map(|(i, _)| i).collect()
    }
}

/// Flood-fill labeling. Ids are ordered by decreasing size, ties broken by
/// the smallest linear index in the component.
pub fn connected_components(mask: &LabelMask, conn: Connectivity) -> Components {
    let g = *mask.geometry();
    let fg = mask.labels();
    let mut raw = vec![0u32; g.len()];
    // (size, first index) per raw component, in discovery order.
    let mut found: Vec<(usize, usize)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if fg[start] == 0 || raw[start] != 0 {
            continue;
        }
        let id = found.len() as u32 + 1;
        raw[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            for_each_neighbor(&g, v, conn, |n| {
                if fg[n] != 0 && raw[n] == 0 {
                    raw[n] = id;
                    queue.push_back(n);
                }
            });
        }
        found.push((size, start));
    }
    let mut order: Vec<usize> = (0..found.len()).collect();
    order.sort_by(|&a, &b| found[b].0.cmp(&found[a].0).then(found[a].1.cmp(&found[b].1)));
    let mut remap = vec![0u32; found.len() + 1];
    for (new, &old) in order.iter().enumerate() {
        remap[old + 1] = new as u32 + 1;
    }
    let labels = raw.iter().map(|&r| remap[r as usize]).collect();
    let sizes = order.iter().map(|&o| found[o].0).collect();
    Components { labels, sizes }
}

/// Inclusive voxel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct VoxelBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl VoxelBox {
    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= v[a] && v[a] <= self.max[a])
    }

    pub fn center(&self) -> [usize; 3] {
        [(self.min[0] + self.max[0]) / 2, (self.min[1] + self.max[1]) / 2, (self.min[2] + self.max[2]) / 2]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PromptKind {
    Click,
    Box,
    #[default]
    Mask,
    SliceBox,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptShape {
    Click([usize; 3]),
    Box(VoxelBox),
    /// 2D box on one axial slice; `bbox.min[2] == bbox.max[2] == slice_index`.
    SliceBox { slice_index: usize, bbox: VoxelBox },
    /// Binary mask on the query grid.
    Mask(LabelMask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub context_label: u16,
    pub shape: PromptShape,
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self.shape {
            PromptShape::Click(_) => PromptKind::Click,
            PromptShape::Box(_) => PromptKind::Box,
            PromptShape::SliceBox { .. } => PromptKind::SliceBox,
            PromptShape::Mask(_) => PromptKind::Mask,
        }
    }

    /// Checks the prompt against the grid it will be used on.
    pub fn validate(&self, geom: &Geometry) -> Result<()> {
        let in_grid = |v: [usize; 3]| (0..3).all(|a| v[a] < geom.dims[a]);
        let bad = |what: &str| Err(Error::InvalidConfig(alloc::format!("invalid prompt: {what}")));
        match &self.shape {
            PromptShape::Click(v) if !in_grid(*v) => bad("click outside grid"),
            PromptShape::Box(b) | PromptShape::SliceBox { bbox: b, .. } if !in_grid(b.max) || (0..3).any(|a| b.min[a] > b.max[a]) => {
                bad("box outside grid or min > max")
            }
            PromptShape::SliceBox { slice_index, bbox } if bbox.min[2] != *slice_index || bbox.max[2] != *slice_index => {
                bad("slice box does not lie on its slice")
            }
            PromptShape::Mask(m) if m.geometry() != geom => Err(Error::GeometryMismatch("mask prompt")),
            PromptShape::Mask(m) if !m.is_binary() => bad("mask prompt is not binary"),
            _ => Ok(()),
        }
    }
}

/// Rounded centroid of the largest 26-connected component, moved to the
/// nearest voxel of that component if it falls on background.
pub fn click_from_mask(m: &LabelMask) -> Result<[usize; 3]> {
    let g = *m.geometry();
    let cc = connected_components(m, Connectivity::TwentySix);
    if cc.count() == 0 {
        return Err(Error::EmptyPrior("click prompt from an empty mask"));
    }
    let voxels = cc.voxels(1);
    let mut sum = [0.0f64; 3];
    for &v in &voxels {
        let c = g.coords(v);
        for a in 0..3 {
            sum[a] += c[a] as f64;
        }
    }
    let n = voxels.len() as f64;
    let mut click = [0usize; 3];
    for a in 0..3 {
        click[a] = (libm::floor(sum[a] / n + 0.5) as usize).min(g.dims[a] - 1);
    }
    if cc.labels[g.index(click[0], click[1], click[2])] == 1 {
        return Ok(click);
    }
    let mut best = (u64::MAX, usize::MAX);
    for &v in &voxels {
        let c = g.coords(v);
        let d2: u64 = (0..3).map(|a| (c[a] as i64 - click[a] as i64).pow(2) as u64).sum();
        if d2 < best.0 {
            best = (d2, v);
        }
    }
    Ok(g.coords(best.1))
}

/// Tight box over every non-zero voxel.
pub fn box_from_mask(m: &LabelMask) -> Result<VoxelBox> {
    let g = *m.geometry();
    let mut b = VoxelBox { min: [usize::MAX; 3], max: [0; 3] };
    let mut any = false;
    for (idx, &l) in m.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        any = true;
        let c = g.coords(idx);
        for a in 0..3 {
            b.min[a] = b.min[a].min(c[a]);
            b.max[a] = b.max[a].max(c[a]);
        }
    }
    if any {
        Ok(b)
    } else {
        Err(Error::EmptyPrior("box prompt from an empty mask"))
    }
}

/// Box of the middle foreground slice: `floor((zmin + zmax) / 2)`, or the
/// nearest non-empty slice (lower on ties) if that slice is empty.
pub fn box_from_middle_slice(m: &LabelMask) -> Result<(usize, VoxelBox)> {
    let g = *m.geometry();
    let [nx, ny, nz] = g.dims;
    let plane = nx * ny;
    let nonempty: Vec<bool> = (0..nz).map(|k| m.labels()[k * plane..(k + 1) * plane].iter().any(|&l| l != 0)).collect();
    let zs: Vec<usize> = (0..nz).filter(|&k| nonempty[k]).collect();
    let (Some(&zmin), Some(&zmax)) = (zs.first(), zs.last()) else {
        return Err(Error::EmptyPrior("slice box prompt from an empty mask"));
    };
    let mid = (zmin + zmax) / 2;
    let z = *zs.iter().min_by_key(|&&k| (k.abs_diff(mid), k)).expect("non-empty");
    let mut b = VoxelBox { min: [usize::MAX, usize::MAX, z], max: [0, 0, z] };
    for j in 0..ny {
        for i in 0..nx {
            if m.get(i, j, z) != 0 {
                b.min[0] = b.min[0].min(i);
                b.min[1] = b.min[1].min(j);
                b.max[0] = b.max[0].max(i);
                b.max[1] = b.max[1].max(j);
            }
        }
    }
    Ok((z, b))
}

/// Prompt of the given kind for the voxels of `mask` equal to
/// `context_label`.
pub fn make_prompt(mask: &LabelMask, kind: PromptKind, context_label: u16) -> Result<Prompt> {
    let m = mask.select(context_label);
    let shape = match kind {
        PromptKind::Click => PromptShape::Click(click_from_mask(&m)?),
        PromptKind::Box => PromptShape::Box(box_from_mask(&m)?),
        PromptKind::SliceBox => {
            let (slice_index, bbox) = box_from_middle_slice(&m)?;
            PromptShape::SliceBox { slice_index, bbox }
        }
        PromptKind::Mask => {
            if m.is_empty_mask() {
                return Err(Error::EmptyPrior("mask prompt from an empty mask"));
            }
            PromptShape::Mask(m)
        }
    };
    Ok(Prompt { context_label, shape })
}
