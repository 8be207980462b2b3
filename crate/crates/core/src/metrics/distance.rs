//! Exact Euclidean distance transform and surface-distance metrics.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::percentile_sorted;
use crate::volume::{Geometry, LabelMask};

/// Lower envelope of parabolas `f[p] + ((q - p) * s)^2` along one line.
/// Infinite entries never contribute.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let key = |p: usize| f[p] + (p as f64 * s) * (p as f64 * s);
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let x = (key(q) - key(last)) / (2.0 * s * s * (q - last) as f64);
            if x <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(x);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        *o = f[v[k]] + d * d;
    }
}

/// Squared distance (mm^2) from every voxel to the nearest non-zero voxel of
/// `seeds`; `+inf` everywhere when `seeds` is empty.
pub fn edt_squared(seeds: &LabelMask) -> Vec<f64> {
    let g = *seeds.geometry();
    let mut d: Vec<f64> = seeds.labels().iter().map(|&l| if l != 0 { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for a in 0..3 {
        let n = g.dims[a];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..g.len() {
            if (start / strides[a]) % n != 0 {
                continue;
            }
            for (t, l) in line.iter_mut().enumerate() {
                *l = d[start + t * strides[a]];
            }
            envelope_1d(&line, g.spacing[a], &mut out, &mut v, &mut z);
            for (t, &o) in out.iter().enumerate() {
                d[start + t * strides[a]] = o;
            }
        }
    }
    d
}

/// Euclidean distance (mm) to the nearest non-zero voxel.
pub fn edt(seeds: &LabelMask) -> Vec<f64> {
    edt_squared(seeds).into_iter().map(libm::sqrt).collect()
}

/// Non-zero voxels with at least one background 6-neighbour; the outside of
/// the grid counts as background.
pub fn surface_voxels(m: &LabelMask) -> LabelMask {
    let g = *m.geometry();
    let l = m.labels();
    let [nx, ny, nz] = g.dims;
    let mut out = vec![0u16; g.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = g.index(i, j, k);
                if l[idx] == 0 {
                    continue;
                }
                let bg = |di: i64, dj: i64, dk: i64| {
                    let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 || l[g.index(a as usize, b as usize, c as usize)] == 0
                };
                if bg(-1, 0, 0) || bg(1, 0, 0) || bg(0, -1, 0) || bg(0, 1, 0) || bg(0, 0, -1) || bg(0, 0, 1) {
                    out[idx] = 1;
                }
            }
        }
    }
    LabelMask::new(g, out).expect("same geometry")
}

/// Distances from each surface voxel of `from` to the surface of `to`, in
/// linear-index order.
pub fn directed_surface_distances(from: &LabelMask, to: &LabelMask) -> Result<Vec<f64>> {
    from.geometry().check_same(to.geometry(), "surface distances")?;
    let sf = surface_voxels(from);
    let dt = edt(&surface_voxels(to));
    Ok(sf.labels().iter().zip(&dt).filter(|(&s, _)| s != 0).map(|(_, &d)| d).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum HdMode {
    /// 95th percentile of the union of both directed distance sets.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    MaxDirected,
}

/// 95th-percentile surface distance in mm; `None` if either mask is empty.
pub fn hd95(a: &LabelMask, b: &LabelMask, mode: HdMode) -> Result<Option<f64>> {
    let mut ab = directed_surface_distances(a, b)?;
    let mut ba = directed_surface_distances(b, a)?;
    if ab.is_empty() || ba.is_empty() {
        return Ok(None);
    }
    let sort = |v: &mut Vec<f64>| v.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    Ok(Some(match mode {
        HdMode::Pooled => {
            ab.append(&mut ba);
            sort(&mut ab);
            percentile_sorted(&ab, 95.0)
        }
        HdMode::MaxDirected => {
            sort(&mut ab);
            sort(&mut ba);
            percentile_sorted(&ab, 95.0).max(percentile_sorted(&ba, 95.0))
        }
    }))
}

/// Normalized surface Dice at tolerance `tol_mm`: both empty gives 1, one
/// empty gives 0.
pub fn nsd(a: &LabelMask, b: &LabelMask, tol_mm: f64) -> Result<f64> {
    let ab = directed_surface_distances(a, b)?;
    let ba = directed_surface_distances(b, a)?;
    Ok(match (ab.is_empty(), ba.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let hits = ab.iter().chain(&ba).filter(|&&d| d <= tol_mm).count();
            hits as f64 / (ab.len() + ba.len()) as f64
        }
    })
}

/// World-space distance between two voxel centers of `g`.
pub fn voxel_distance(g: &Geometry, a: [usize; 3], b: [usize; 3]) -> f64 {
    let d = |x: usize, y: usize, s: f64| (x as f64 - y as f64) * s;
    let (dx, dy, dz) = (d(a[0], b[0], g.spacing[0]), d(a[1], b[1], g.spacing[1]), d(a[2], b[2], g.spacing[2]));
    libm::sqrt(dx * dx + dy * dy + dz * dz)
}
