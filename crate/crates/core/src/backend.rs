//! Segmentation backends: the interface plus two self-contained stand-ins.
//!
//! `Oracle` corrupts a known ground truth in a controlled, seeded way.
//! `RegionGrow` is a classical prompted segmenter. Backends that wrap external
//! pretrained models live in the std crate and implement the same trait.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::edt;
use crate::prompting::{connected_components, for_each_neighbor, Connectivity, Prompt, PromptShape, VoxelBox};
use crate::volume::{Geometry, LabelMask, ProbMask, Volume};

pub struct SegmentRequest<'a> {
    pub query: &'a Volume,
    /// `None` for the non-promptable path.
    pub prompt: Option<&'a Prompt>,
    /// Known binary truth for this query, when the caller has one. Only the
    /// oracle reads it; real backends ignore it.
    pub reference: Option<&'a LabelMask>,
}

pub trait Backend {
    fn name(&self) -> String;

    /// Output is always on the query grid with values in `[0, 1]`.
    fn segment(&self, req: &SegmentRequest<'_>) -> Result<ProbMask>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Corruption {
    /// Erosion radius in mm.
    pub erode_r: f64,
    /// Dilation radius in mm.
    pub dilate_r: f64,
    /// Probability of dropping each 26-connected component.
    pub drop_component_prob: f64,
    /// Probability of flipping each voxel on the foreground/background border.
    pub boundary_noise_prob: f64,
    pub seed: u64,
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        let radius_ok = |r: f64| r.is_finite() && r >= 0.0;
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !radius_ok(self.erode_r) || !radius_ok(self.dilate_r) {
            return Err(Error::InvalidConfig("corruption radii must be finite and non-negative".into()));
        }
        if !prob_ok(self.drop_component_prob) || !prob_ok(self.boundary_noise_prob) {
            return Err(Error::InvalidConfig("corruption probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies erode, dilate, component drop and boundary flips, in that
    /// order, from a single RNG stream.
    pub fn apply(&self, gt: &LabelMask) -> LabelMask {
        let g = *gt.geometry();
        let mut m = gt.binarized();
        if self.erode_r > 0.0 {
            let background = LabelMask::new(g, m.labels().iter().map(|&l| u16::from(l == 0)).collect()).expect("same grid");
            let d = edt(&background);
            m = LabelMask::new(g, m.labels().iter().zip(&d).map(|(&l, &d)| u16::from(l != 0 && d > self.erode_r)).collect())
                .expect("same grid");
        }
        if self.dilate_r > 0.0 {
            let d = edt(&m);
            m = LabelMask::new(g, d.iter().map(|&d| u16::from(d <= self.dilate_r)).collect()).expect("same grid");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut labels = m.into_labels();
        if self.drop_component_prob > 0.0 {
            let cc = connected_components(&LabelMask::new(g, labels.clone()).expect("same grid"), Connectivity::TwentySix);
            let dropped: Vec<bool> = (0..cc.count()).map(|_| rng.random::<f64>() < self.drop_component_prob).collect();
            for (l, &c) in labels.iter_mut().zip(&cc.labels) {
                if c != 0 && dropped[c as usize - 1] {
                    *l = 0;
                }
            }
        }
        if self.boundary_noise_prob > 0.0 {
            let border: Vec<bool> = (0..g.len())
                .map(|idx| {
                    let mut differs = false;
                    for_each_neighbor(&g, idx, Connectivity::Six, |n| differs |= labels[n] != labels[idx]);
                    differs
                })
                .collect();
            for (l, &b) in labels.iter_mut().zip(&border) {
                if b && rng.random::<f64>() < self.boundary_noise_prob {
                    *l = 1 - *l;
                }
            }
        }
        LabelMask::new(g, labels).expect("same grid")
    }
}

/// Returns a corrupted copy of a known ground truth.
#[derive(Clone, Debug, Default)]
pub struct Oracle {
    /// Used when the request carries no reference.
    pub gt: Option<LabelMask>,
    pub corruption: Corruption,
}

impl Backend for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    /// A request reference is taken as the binary target. Otherwise the stored
    /// ground truth is used: only the prompt's context label with a prompt,
    /// every non-zero label without one.
    fn segment(&self, req: &SegmentRequest<'_>) -> Result<ProbMask> {
        self.corruption.validate()?;
        let target = match (req.reference, &self.gt, req.prompt) {
            (Some(r), _, _) => r.binarized(),
            (None, Some(gt), Some(p)) => gt.select(p.context_label),
            (None, Some(gt), None) => gt.binarized(),
            (None, None, _) => return Err(Error::Backend("oracle has no ground truth for this query".into())),
        };
        target.geometry().check_same(req.query.geometry(), "oracle ground truth")?;
        Ok(self.corruption.apply(&target).to_prob())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RegionGrow {
    pub k_sigma: f64,
    pub max_iters: usize,
}

impl Default for RegionGrow {
    fn default() -> Self {
        RegionGrow { k_sigma: 2.5, max_iters: 200 }
    }
}

#[derive(Default)]
struct RunningStats {
    n: f64,
    sum: f64,
    sum2: f64,
}

impl RunningStats {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum2 += v * v;
    }

    fn band(&self, k: f64) -> (f64, f64) {
        let mean = self.sum / self.n;
        let var = (self.sum2 / self.n - mean * mean).max(0.0);
        let half = k * libm::sqrt(var);
        (mean - half, mean + half)
    }
}

impl RegionGrow {
    /// Seed voxels and the optional box that growth may not leave.
    fn seeds(g: &Geometry, prompt: &Prompt) -> Result<(Vec<usize>, Option<VoxelBox>)> {
        prompt.validate(g)?;
        let at = |v: [usize; 3]| g.index(v[0], v[1], v[2]);
        Ok(match &prompt.shape {
            PromptShape::Click(v) => (vec![at(*v)], None),
            PromptShape::Box(b) => (vec![at(b.center())], Some(*b)),
            PromptShape::SliceBox { bbox, .. } => {
                let columns = VoxelBox { min: [bbox.min[0], bbox.min[1], 0], max: [bbox.max[0], bbox.max[1], g.dims[2] - 1] };
                (vec![at(bbox.center())], Some(columns))
            }
            PromptShape::Mask(m) => {
                let s: Vec<usize> = (0..g.len()).filter(|&i| m.labels()[i] != 0).collect();
                if s.is_empty() {
                    return Err(Error::EmptyPrior("region growing from an empty mask prompt"));
                }
                (s, None)
            }
        })
    }

    pub fn grow(&self, query: &Volume, prompt: &Prompt) -> Result<LabelMask> {
        if !(self.k_sigma.is_finite() && self.k_sigma > 0.0) {
            return Err(Error::InvalidConfig("k_sigma must be positive".into()));
        }
        let g = *query.geometry();
        let (seeds, clip) = Self::seeds(&g, prompt)?;
        let data = query.data();
        let allowed = |idx: usize| clip.is_none_or(|b| b.contains(g.coords(idx)));

        let mut region = vec![false; g.len()];
        for &s in &seeds {
            region[s] = true;
        }
        // Until the region has 27 voxels the band comes from the seeds' 3x3x3
        // neighbourhoods, so a single click still has a spread estimate.
        let mut local = RunningStats::default();
        let mut counted = vec![false; g.len()];
        for &s in &seeds {
            for idx in core::iter::once(s).chain(neighbors26(&g, s)) {
                if !counted[idx] && allowed(idx) {
                    counted[idx] = true;
                    local.push(f64::from(data[idx]));
                }
            }
        }
        let mut own = RunningStats::default();
        for &s in &seeds {
            own.push(f64::from(data[s]));
        }
        let mut frontier = seeds;
        for _ in 0..self.max_iters {
            let (lo, hi) = if own.n >= 27.0 { own.band(self.k_sigma) } else { local.band(self.k_sigma) };
            let mut added = Vec::new();
            for &v in &frontier {
                for_each_neighbor(&g, v, Connectivity::TwentySix, |n| {
                    let x = f64::from(data[n]);
                    if !region[n] && allowed(n) && lo <= x && x <= hi {
                        region[n] = true;
                        added.push(n);
                    }
                });
            }
            if added.is_empty() {
                break;
            }
            for &a in &added {
                own.push(f64::from(data[a]));
            }
            frontier = added;
        }
        LabelMask::new(g, region.iter().map(|&r| u16::from(r)).collect())
    }
}

fn neighbors26(g: &Geometry, idx: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(26);
    for_each_neighbor(g, idx, Connectivity::TwentySix, |n| out.push(n));
    out
}

impl Backend for RegionGrow {
    fn name(&self) -> String {
        "region-grow".into()
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<ProbMask> {
        let prompt = req.prompt.ok_or(Error::EmptyPrior("region growing needs a prompt"))?;
        Ok(self.grow(req.query, prompt)?.to_prob())
    }
}
