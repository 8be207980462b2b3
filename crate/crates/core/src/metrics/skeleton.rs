//! Topology-preserving 3D thinning and centerline Dice.
//!
//! A voxel is simple when exactly one 26-component of foreground remains in
//! its 26-neighbourhood and exactly one 6-component of background in its
//! 18-neighbourhood touches it through a face. Thinning peels simple border
//! voxels one face direction at a time and never removes curve endpoints.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::volume::LabelMask;

const CENTER: usize = 13;

#[inline]
fn offset(n: usize) -> [i64; 3] {
    [(n % 3) as i64 - 1, ((n / 3) % 3) as i64 - 1, (n / 9) as i64 - 1]
}

struct Cube {
    adj26: [[bool; 27]; 27],
    adj6: [[bool; 27]; 27],
    in18: [bool; 27],
    face: [bool; 27],
}

impl Cube {
    fn new() -> Self {
        let mut c = Cube { adj26: [[false; 27]; 27], adj6: [[false; 27]; 27], in18: [false; 27], face: [false; 27] };
        for a in 0..27 {
            let oa = offset(a);
            let l1: i64 = oa.iter().map(|x| x.abs()).sum();
            c.in18[a] = a != CENTER && l1 <= 2;
            c.face[a] = l1 == 1;
            for b in 0..27 {
                let ob = offset(b);
                let d: Vec<i64> = (0..3).map(|i| (oa[i] - ob[i]).abs()).collect();
                let cheb = d.iter().copied().max().unwrap_or(0);
                let man: i64 = d.iter().sum();
                c.adj26[a][b] = a != b && cheb == 1;
                c.adj6[a][b] = man == 1;
            }
        }
        c
    }

    /// Number of components among `members` under `adj`; when `touch` is
    /// given, only components containing one of those positions count.
    fn components(&self, members: &[bool; 27], adj: &[[bool; 27]; 27], touch: Option<&[bool; 27]>) -> usize {
        let mut seen = [false; 27];
        let mut count = 0;
        let mut stack = [0usize; 27];
        for s in 0..27 {
            if !members[s] || seen[s] {
                continue;
            }
            seen[s] = true;
            let mut top = 1;
            stack[0] = s;
            let mut touches = touch.is_none_or(|t| t[s]);
            while top > 0 {
                top -= 1;
                let v = stack[top];
                for w in 0..27 {
                    if members[w] && !seen[w] && adj[v][w] {
                        seen[w] = true;
                        touches |= touch.is_some_and(|t| t[w]);
                        stack[top] = w;
                        top += 1;
                    }
                }
            }
            if touches {
                count += 1;
            }
        }
        count
    }

    fn is_simple(&self, nb: &[bool; 27]) -> bool {
        let mut fg = *nb;
        fg[CENTER] = false;
        if self.components(&fg, &self.adj26, None) != 1 {
            return false;
        }
        let mut bg = [false; 27];
        for i in 0..27 {
            bg[i] = self.in18[i] && !nb[i];
        }
        self.components(&bg, &self.adj6, Some(&self.face)) == 1
    }
}

fn neighborhood(l: &[u16], dims: [usize; 3], idx: usize) -> [bool; 27] {
    let [nx, ny, nz] = dims;
    let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
    let mut nb = [false; 27];
    for (n, slot) in nb.iter_mut().enumerate() {
        let o = offset(n);
        let (a, b, c) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
        if a >= 0 && b >= 0 && c >= 0 && a < nx as i64 && b < ny as i64 && c < nz as i64 {
            *slot = l[a as usize + nx * (b as usize + ny * c as usize)] != 0;
        }
    }
    nb
}

/// Face directions visited in each thinning cycle, as neighbourhood indices.
const DIRECTIONS: [usize; 6] = [4, 22, 10, 16, 12, 14];

/// Iterative directional thinning of the non-zero voxels of `m`.
pub fn skeletonize3d(m: &LabelMask) -> LabelMask {
    let g = *m.geometry();
    let dims = g.dims;
    let cube = Cube::new();
    let mut l: Vec<u16> = m.labels().iter().map(|&v| u16::from(v != 0)).collect();
    let mut fg: Vec<usize> = (0..l.len()).filter(|&i| l[i] != 0).collect();
    loop {
        let mut changed = false;
        for &dir in &DIRECTIONS {
            let removable = |l: &[u16], idx: usize| {
                let nb = neighborhood(l, dims, idx);
                if nb[dir] {
                    return false;
                }
                let count = nb.iter().filter(|&&b| b).count() - 1;
                count != 1 && cube.is_simple(&nb)
            };
            let candidates: Vec<usize> = fg.iter().copied().filter(|&idx| removable(&l, idx)).collect();
            for idx in candidates {
                if removable(&l, idx) {
                    l[idx] = 0;
                    changed = true;
                }
            }
            fg.retain(|&idx| l[idx] != 0);
        }
        if !changed {
            break;
        }
    }
    LabelMask::new(g, l).expect("same geometry")
}

/// Centerline Dice; `None` when either skeleton is empty.
pub fn cl_dice(pred: &LabelMask, gt: &LabelMask) -> Result<Option<f64>> {
    pred.geometry().check_same(gt.geometry(), "cl_dice")?;
    let sp = skeletonize3d(pred);
    let sg = skeletonize3d(gt);
    let (np, ng) = (sp.foreground_count(), sg.foreground_count());
    if np == 0 || ng == 0 {
        return Ok(None);
    }
    let hit = |s: &LabelMask, m: &LabelMask| s.labels().iter().zip(m.labels()).filter(|(&a, &b)| a != 0 && b != 0).count();
    let tprec = hit(&sp, gt) as f64 / np as f64;
    let tsens = hit(&sg, pred) as f64 / ng as f64;
    Ok(Some(if tprec + tsens > 0.0 { 2.0 * tprec * tsens / (tprec + tsens) } else { 0.0 }))
}

/// Vertices minus edges of the 26-adjacency graph of a mask.
pub fn euler_vertices_minus_edges(m: &LabelMask) -> i64 {
    let g = *m.geometry();
    let l = m.labels();
    let mut v = 0i64;
    let mut e = 0i64;
    for idx in 0..g.len() {
        if l[idx] == 0 {
            continue;
        }
        v += 1;
        let nb = neighborhood(l, g.dims, idx);
        // Count each edge once, from its lower-index end.
        e += (CENTER + 1..27).filter(|&n| nb[n]).count() as i64;
    }
    v - e
}

/// Number of non-zero 26-neighbours of every voxel (0 for background).
pub fn neighbor_counts(m: &LabelMask) -> Vec<u8> {
    let g = *m.geometry();
    let l = m.labels();
    let mut out = vec![0u8; g.len()];
    for idx in 0..g.len() {
        if l[idx] != 0 {
            out[idx] = (neighborhood(l, g.dims, idx).iter().filter(|&&b| b).count() - 1) as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{connected_components, Connectivity};
    use crate::volume::Geometry;

    fn tube(dims: [usize; 3], z_end: usize, r: f64, cx: f64, cy: f64) -> LabelMask {
        LabelMask::from_fn(Geometry::with_dims(dims).unwrap(), |[i, j, k]| {
            let d2 = (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2);
            u16::from(d2 <= r * r && k >= 1 && k < z_end)
        })
        .unwrap()
    }

    #[test]
    fn simple_point_basics() {
        let c = Cube::new();
        let mut nb = [false; 27];
        nb[CENTER] = true;
        assert!(!c.is_simple(&nb), "isolated voxel");
        nb[14] = true;
        assert!(c.is_simple(&nb), "end of a segment");
        nb[12] = true;
        assert!(!c.is_simple(&nb), "middle of a line");
        let full = [true; 27];
        assert!(!c.is_simple(&full), "interior voxel");
    }

    #[test]
    fn line_is_unchanged() {
        let m = LabelMask::from_fn(Geometry::with_dims([5, 5, 12]).unwrap(), |[i, j, k]| u16::from(i == 2 && j == 2 && (2..10).contains(&k))).unwrap();
        assert_eq!(skeletonize3d(&m), m);
    }

    #[test]
    fn bar_thins_to_a_curve() {
        let m = LabelMask::from_fn(Geometry::with_dims([7, 7, 20]).unwrap(), |[i, j, k]| {
            u16::from((2..=4).contains(&i) && (2..=4).contains(&j) && (2..18).contains(&k))
        })
        .unwrap();
        let s = skeletonize3d(&m);
        assert_eq!(connected_components(&s, Connectivity::TwentySix).count(), 1);
        let counts = neighbor_counts(&s);
        assert!(counts.iter().zip(s.labels()).all(|(&c, &l)| l == 0 || c <= 2), "thickness 1");
        let g = *s.geometry();
        let zs: Vec<usize> = (0..g.len()).filter(|&i| s.labels()[i] != 0).map(|i| g.coords(i)[2]).collect();
        let (lo, hi) = (*zs.iter().min().unwrap(), *zs.iter().max().unwrap());
        assert!(lo <= 3 && hi >= 16, "z range {lo}..{hi}");
    }

    #[test]
    fn torus_keeps_one_cycle() {
        let m = LabelMask::from_fn(Geometry::with_dims([26, 26, 9]).unwrap(), |[i, j, k]| {
            let (x, y, z) = (i as f64 - 12.5, j as f64 - 12.5, k as f64 - 4.0);
            let q = (x * x + y * y).sqrt() - 8.0;
            u16::from(q * q + z * z <= 2.6 * 2.6)
        })
        .unwrap();
        let s = skeletonize3d(&m);
        assert!(s.foreground_count() > 20);
        assert_eq!(connected_components(&s, Connectivity::TwentySix).count(), 1);
        assert_eq!(euler_vertices_minus_edges(&s), 0);
    }

    #[test]
    fn cl_dice_examples() {
        let gt = tube([11, 11, 40], 39, 2.5, 5.0, 5.0);
        assert_eq!(cl_dice(&gt, &gt).unwrap(), Some(1.0));
        let half = tube([11, 11, 40], 20, 2.5, 5.0, 5.0);
        let v = cl_dice(&half, &gt).unwrap().unwrap();
        assert!((v - 2.0 / 3.0).abs() < 0.05, "{v}");
        let a = tube([20, 11, 20], 19, 2.0, 4.0, 5.0);
        let b = tube([20, 11, 20], 19, 2.0, 14.0, 5.0);
        assert_eq!(cl_dice(&a, &b).unwrap(), Some(0.0));
        let empty = LabelMask::empty(*a.geometry()).unwrap();
        assert_eq!(cl_dice(&a, &empty).unwrap(), None);
        assert!(skeletonize3d(&empty).is_empty_mask());
    }
}
