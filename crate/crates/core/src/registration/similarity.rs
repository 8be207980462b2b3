use alloc::vec::Vec;

use crate::error::Result;
use crate::math::pairwise_sum;
use crate::volume::Volume;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SimilarityKind {
    /// Mean squared intensity difference.
    #[default]
    Mse,
    /// `1 - NCC` with global normalized cross-correlation.
    Ncc,
}

/// Dissimilarity between two volumes on the same grid.
pub fn similarity_loss(fixed: &Volume, warped: &Volume, kind: SimilarityKind) -> Result<f64> {
    fixed.geometry().check_same(warped.geometry(), "similarity_loss")?;
    let f: Vec<f64> = fixed.data().iter().map(|&x| x as f64).collect();
    let w: Vec<f64> = warped.data().iter().map(|&x| x as f64).collect();
    let mut d = alloc::vec![0.0; f.len()];
    Ok(loss_and_derivative(&f, &w, kind, &mut d))
}

/// Loss plus `dL/dwarped` per sample, written to `dl_dw`.
pub(crate) fn loss_and_derivative(fixed: &[f64], warped: &[f64], kind: SimilarityKind, dl_dw: &mut [f64]) -> f64 {
    let n = fixed.len() as f64;
    match kind {
        SimilarityKind::Mse => {
            let mut sq = Vec::with_capacity(fixed.len());
            for ((&f, &w), d) in fixed.iter().zip(warped).zip(dl_dw.iter_mut()) {
                let r = w - f;
                sq.push(r * r);
                *d = 2.0 * r / n;
            }
            pairwise_sum(&sq) / n
        }
        SimilarityKind::Ncc => {
            let fm = pairwise_sum(fixed) / n;
            let wm = pairwise_sum(warped) / n;
            let df: Vec<f64> = fixed.iter().map(|&f| f - fm).collect();
            let dw: Vec<f64> = warped.iter().map(|&w| w - wm).collect();
            let prod = |a: &[f64], b: &[f64]| pairwise_sum(&a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>());
            let (cov, sw, sf) = (prod(&df, &dw), prod(&dw, &dw), prod(&df, &df));
            if sw <= 0.0 || sf <= 0.0 {
                dl_dw.iter_mut().for_each(|d| *d = 0.0);
                return 1.0;
            }
            let denom = libm::sqrt(sw * sf);
            let ncc = cov / denom;
            for ((&a, &b), d) in df.iter().zip(&dw).zip(dl_dw.iter_mut()) {
                *d = -(a / denom - ncc * b / sw);
            }
            1.0 - ncc
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};

    fn random_pair(seed: u64) -> (Volume, Volume) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::with_dims([7, 6, 5]).unwrap();
        let a = Volume::from_fn(g, |_| rng.random::<f32>()).unwrap();
        let b = Volume::from_fn(g, |_| rng.random::<f32>()).unwrap();
        (a, b)
    }

    #[test]
    fn mse_examples() {
        let g = Geometry::with_dims([4, 4, 4]).unwrap();
        let z = Volume::filled(g, 0.0).unwrap();
        let o = Volume::filled(g, 1.0).unwrap();
        assert_eq!(similarity_loss(&z, &z, SimilarityKind::Mse).unwrap(), 0.0);
        assert_eq!(similarity_loss(&z, &o, SimilarityKind::Mse).unwrap(), 1.0);
        let other = Volume::filled(Geometry::with_dims([4, 4, 3]).unwrap(), 0.0).unwrap();
        assert!(similarity_loss(&z, &other, SimilarityKind::Mse).is_err());
    }

    #[test]
    fn mse_matches_direct_sum_oracle() {
        let (a, b) = random_pair(1);
        let mut acc = 0.0f64;
        let [nx, ny, nz] = a.dims();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let d = a.get(i, j, k) as f64 - b.get(i, j, k) as f64;
                    acc += d * d;
                }
            }
        }
        let oracle = acc / (nx * ny * nz) as f64;
        assert!((similarity_loss(&a, &b, SimilarityKind::Mse).unwrap() - oracle).abs() < 1e-7);
    }

    #[test]
    fn ncc_identity_and_derivative() {
        let (a, b) = random_pair(2);
        assert!(similarity_loss(&a, &a, SimilarityKind::Ncc).unwrap().abs() < 1e-12);
        let f: Vec<f64> = a.data().iter().map(|&x| x as f64).collect();
        let w: Vec<f64> = b.data().iter().map(|&x| x as f64).collect();
        let mut d = alloc::vec![0.0; f.len()];
        loss_and_derivative(&f, &w, SimilarityKind::Ncc, &mut d);
        let h = 1e-6;
        for idx in [0, 17, 101, 200] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[idx] += h;
            wm[idx] -= h;
            let mut s = alloc::vec![0.0; f.len()];
            let fd = (loss_and_derivative(&f, &wp, SimilarityKind::Ncc, &mut s)
                - loss_and_derivative(&f, &wm, SimilarityKind::Ncc, &mut s))
                / (2.0 * h);
            assert!((fd - d[idx]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }
}
