//! Overlap, surface and centerline metrics.

mod distance;
mod skeleton;

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::LabelMask;

pub use distance::{directed_surface_distances, edt, edt_squared, hd95, nsd, surface_voxels, voxel_distance, HdMode};
pub use skeleton::{cl_dice, euler_vertices_minus_edges, neighbor_counts, skeletonize3d};

/// Dice overlap of the non-zero voxels; two empty masks score 1.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    a.geometry().check_same(b.geometry(), "dice")?;
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        sa += usize::from(x);
        sb += usize::from(y);
    }
    Ok(if sa + sb == 0 { 1.0 } else { 2.0 * inter as f64 / (sa + sb) as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MetricOptions {
    pub tolerance_mm: f64,
    pub hd_mode: HdMode,
    /// Skeletonization dominates the cost on large masks.
    pub cl_dice: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { tolerance_mm: 1.0, hd_mode: HdMode::Pooled, cl_dice: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ContextMetrics {
    pub label: u16,
    pub dice: f64,
    pub nsd: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    /// `None` when a skeleton is empty or clDice was not requested.
    pub cl_dice: Option<f64>,
}

impl ContextMetrics {
    pub fn evaluate(label: u16, pred: &LabelMask, gt: &LabelMask, opts: &MetricOptions) -> Result<Self> {
        Ok(ContextMetrics {
            label,
            dice: dice(pred, gt)?,
            nsd: nsd(pred, gt, opts.tolerance_mm)?,
            hd95: hd95(pred, gt, opts.hd_mode)?,
            cl_dice: if opts.cl_dice { cl_dice(pred, gt)? } else { None },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MetricsReport {
    /// Means over contexts; undefined entries are skipped.
    pub dice: f64,
    pub nsd: f64,
    pub hd95: Option<f64>,
    pub cl_dice: Option<f64>,
    pub tolerance_mm: f64,
    pub hd_mode: HdMode,
    pub contexts: Vec<ContextMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn from_contexts(contexts: Vec<ContextMetrics>, opts: &MetricOptions) -> Self {
        MetricsReport {
            dice: mean_defined(contexts.iter().map(|c| Some(c.dice))).unwrap_or(f64::NAN),
            nsd: mean_defined(contexts.iter().map(|c| Some(c.nsd))).unwrap_or(f64::NAN),
            hd95: mean_defined(contexts.iter().map(|c| c.hd95)),
            cl_dice: mean_defined(contexts.iter().map(|c| c.cl_dice)),
            tolerance_mm: opts.tolerance_mm,
            hd_mode: opts.hd_mode,
            contexts,
        }
    }

    /// Scores every listed label of `pred` against the same label of `gt`.
    /// An empty `labels` means every label present in `gt`.
    pub fn evaluate(pred: &LabelMask, gt: &LabelMask, labels: &[u16], opts: &MetricOptions) -> Result<Self> {
        pred.geometry().check_same(gt.geometry(), "metrics report")?;
        let labels: Vec<u16> = if labels.is_empty() { gt.label_set() } else { labels.to_vec() };
        let contexts = labels
            .iter()
            .map(|&l| ContextMetrics::evaluate(l, &pred.select(l), &gt.select(l), opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_contexts(contexts, opts))
    }
}
