//! Immutable 3D grids: scalar volumes, label masks and probability masks.
//!
//! All grids store data x-fastest (`index = i + nx * (j + ny * k)`), carry a
//! physical spacing (mm per voxel) and the world position of voxel `(0,0,0)`.
//! Orientation beyond axis-aligned spacing/origin is not modelled.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{percentile_sorted, Vec3};

/// Voxel counts, spacing and origin shared by every grid type.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-finite origin {:?}", self.origin)));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn voxel_to_world(&self, p: Vec3) -> Vec3 {
        [
            self.origin[0] + p[0] * self.spacing[0],
            self.origin[1] + p[1] * self.spacing[1],
            self.origin[2] + p[2] * self.spacing[2],
        ]
    }

    #[inline]
    pub fn world_to_voxel(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World position of the grid center.
    pub fn center(&self) -> Vec3 {
        self.voxel_to_world([
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        ])
    }

    /// Field-of-view extent per axis in mm (`dims * spacing`).
    pub fn extent(&self) -> Vec3 {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Geometry of a grid mean-pooled by `factor` along every axis.
    pub fn downsampled(&self, factor: usize) -> Geometry {
        let f = factor.max(1);
        let mut dims = [0; 3];
        let mut spacing = [0.0; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            dims[a] = self.dims[a].div_ceil(f);
            spacing[a] = self.spacing[a] * f as f64;
            origin[a] = self.origin[a] + (f as f64 - 1.0) / 2.0 * self.spacing[a];
        }
        Geometry { dims, spacing, origin }
    }

    pub fn same_grid(&self, other: &Geometry) -> bool {
        self == other
    }

    pub fn check_same(&self, other: &Geometry, what: &'static str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(what))
        }
    }
}

/// Scalar intensity volume (`X_atlas`, `X_query`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::LengthMismatch { expected: geom.len(), actual: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Volume { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        Self::new(geom, vec![value; geom.len()])
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    data.push(f([i, j, k]));
                }
            }
        }
        Self::new(geom, data)
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geom.index(i, j, k)]
    }

    /// Mean-pools by `factor`; partial blocks at the far edges average the
    /// voxels they contain.
    pub fn downsample(&self, factor: usize) -> Volume {
        if factor <= 1 {
            return self.clone();
        }
        let g = self.geom.downsampled(factor);
        let [nx, ny, nz] = self.geom.dims;
        let mut sums = vec![0.0f64; g.len()];
        let mut counts = vec![0u32; g.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let o = g.index(i / factor, j / factor, k / factor);
                    sums[o] += self.data[self.geom.index(i, j, k)] as f64;
                    counts[o] += 1;
                }
            }
        }
        let data = sums.iter().zip(&counts).map(|(s, &c)| (s / c as f64) as f32).collect();
        Volume { geom: g, data }
    }
}

/// Integer label grid; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    geom: Geometry,
    labels: Vec<u16>,
}

impl LabelMask {
    pub fn new(geom: Geometry, labels: Vec<u16>) -> Result<Self> {
        geom.validate()?;
        if labels.len() != geom.len() {
            return Err(Error::LengthMismatch { expected: geom.len(), actual: labels.len() });
        }
        Ok(LabelMask { geom, labels })
    }

    pub fn empty(geom: Geometry) -> Result<Self> {
        Self::new(geom, vec![0; geom.len()])
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> u16) -> Result<Self> {
        let mut labels = Vec::with_capacity(geom.len());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    labels.push(f([i, j, k]));
                }
            }
        }
        Self::new(geom, labels)
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    #[inline]
    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u16> {
        self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.labels[self.geom.index(i, j, k)]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct non-zero labels.
    pub fn label_set(&self) -> Vec<u16> {
        let mut seen = vec![false; self.max_label() as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen.iter().enumerate().skip(1).filter(|(_, &s)| s).map(|(l, _)| l as u16).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&l| l <= 1)
    }

    /// `{0,1}` mask of the voxels carrying `label`.
    pub fn select(&self, label: u16) -> LabelMask {
        let labels = self.labels.iter().map(|&l| u16::from(l == label)).collect();
        LabelMask { geom: self.geom, labels }
    }

    /// `{0,1}` mask of all non-zero voxels.
    pub fn binarized(&self) -> LabelMask {
        let labels = self.labels.iter().map(|&l| u16::from(l != 0)).collect();
        LabelMask { geom: self.geom, labels }
    }

    pub fn to_prob(&self) -> ProbMask {
        let data = self.labels.iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
        ProbMask { geom: self.geom, data }
    }

    pub fn to_volume(&self) -> Volume {
        let data = self.labels.iter().map(|&l| l as f32).collect();
        Volume { geom: self.geom, data }
    }
}

/// Per-voxel foreground probability in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMask {
    geom: Geometry,
    data: Vec<f32>,
}

impl ProbMask {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::LengthMismatch { expected: geom.len(), actual: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange { index, value });
        }
        Ok(ProbMask { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Self {
        ProbMask { geom, data: vec![0.0; geom.len()] }
    }

    pub(crate) fn from_raw(geom: Geometry, data: Vec<f32>) -> Self {
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        ProbMask { geom, data }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_volume(&self) -> Volume {
        Volume { geom: self.geom, data: self.data.clone() }
    }

    /// Label 1 where the probability is at least `t`.
    pub fn threshold(&self, t: f32) -> LabelMask {
        let labels = self.data.iter().map(|&p| u16::from(p >= t)).collect();
        LabelMask { geom: self.geom, labels }
    }
}

/// Trilinear sample at a continuous voxel coordinate with edge clamping.
pub fn trilinear_sample(v: &Volume, p: Vec3) -> f64 {
    sample_with_gradient(&v.data, &v.geom.dims, p).0
}

#[inline]
pub(crate) fn axis_cell(p: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let (c, inside) = if p < 0.0 {
        (0.0, false)
    } else if p > max {
        (max, false)
    } else {
        (p, true)
    };
    let mut i0 = libm::floor(c) as usize;
    if i0 >= n - 1 {
        i0 = n - 2;
    }
    (i0, i0 + 1, c - i0 as f64, inside)
}

/// Trilinear value and its exact partial derivatives with respect to the
/// voxel coordinate. Clamped axes have zero derivative.
#[inline]
pub(crate) fn sample_with_gradient(data: &[f32], dims: &[usize; 3], p: Vec3) -> (f64, Vec3) {
    let (x0, x1, fx, ix) = axis_cell(p[0], dims[0]);
    let (y0, y1, fy, iy) = axis_cell(p[1], dims[1]);
    let (z0, z1, fz, iz) = axis_cell(p[2], dims[2]);
    let nx = dims[0];
    let nxy = nx * dims[1];
    let at = |i: usize, j: usize, k: usize| data[i + nx * j + nxy * k] as f64;
    let c000 = at(x0, y0, z0);
    let c100 = at(x1, y0, z0);
    let c010 = at(x0, y1, z0);
    let c110 = at(x1, y1, z0);
    let c001 = at(x0, y0, z1);
    let c101 = at(x1, y0, z1);
    let c011 = at(x0, y1, z1);
    let c111 = at(x1, y1, z1);

    let c00 = c000 + (c100 - c000) * fx;
    let c10 = c010 + (c110 - c010) * fx;
    let c01 = c001 + (c101 - c001) * fx;
    let c11 = c011 + (c111 - c011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    let value = c0 + (c1 - c0) * fz;

    let mut grad = [0.0; 3];
    if ix && dims[0] > 1 {
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        let d0 = d00 + (d10 - d00) * fy;
        let d1 = d01 + (d11 - d01) * fy;
        grad[0] = d0 + (d1 - d0) * fz;
    }
    if iy && dims[1] > 1 {
        let e0 = c10 - c00;
        let e1 = c11 - c01;
        grad[1] = e0 + (e1 - e0) * fz;
    }
    if iz && dims[2] > 1 {
        grad[2] = c1 - c0;
    }
    (value, grad)
}

/// Central differences in the interior, one-sided at borders, divided by
/// spacing. An axis of length 1 has zero gradient.
pub fn spatial_gradient(v: &Volume) -> [Volume; 3] {
    let g = v.geom;
    let [nx, ny, nz] = g.dims;
    let mut out = [vec![0.0f32; g.len()], vec![0.0f32; g.len()], vec![0.0f32; g.len()]];
    let strides = [1, nx, nx * ny];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = g.index(i, j, k);
                let pos = [i, j, k];
                for a in 0..3 {
                    let n = g.dims[a];
                    if n < 2 {
                        continue;
                    }
                    let s = strides[a];
                    let d = if pos[a] == 0 {
                        v.data[idx + s] as f64 - v.data[idx] as f64
                    } else if pos[a] == n - 1 {
                        v.data[idx] as f64 - v.data[idx - s] as f64
                    } else {
                        (v.data[idx + s] as f64 - v.data[idx - s] as f64) / 2.0
                    };
                    out[a][idx] = (d / g.spacing[a]) as f32;
                }
            }
        }
    }
    let [gx, gy, gz] = out;
    [Volume { geom: g, data: gx }, Volume { geom: g, data: gy }, Volume { geom: g, data: gz }]
}

pub const DEFAULT_LO_PERCENTILE: f64 = 0.5;
pub const DEFAULT_HI_PERCENTILE: f64 = 99.5;

/// Clips to the `[lo_pct, hi_pct]` percentile range and rescales to `[0, 1]`.
/// A constant input (empty range) maps to all zeros.
pub fn normalize_intensity(v: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::InvalidConfig(format!("percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}")));
    }
    let mut sorted: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data
            .iter()
            .map(|&x| {
                let c = (x as f64).clamp(lo, hi);
                (((c - lo) / range) as f32).clamp(0.0, 1.0)
            })
            .collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Ok(Volume { geom: v.geom, data })
}
