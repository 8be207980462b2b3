//! Rigid (6 parameters) and affine (12 parameters) pre-registration over a
//! mean-pooled pyramid.
//!
//! For a sample `x` with offset `d = x - c` from the transform center, the
//! mapped point is `A d + c + t`. Writing `g(x) = dL/dw(x) * grad_mm M(phi(x))`,
//! the loss gradient with respect to the linear part is `sum_x g(x) d^T` and
//! with respect to the translation `sum_x g(x)`. Rigid angles and normalized
//! translations follow by the chain rule.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;

use super::similarity::loss_and_derivative;
use super::{adam_best, RegConfig, SimilarityKind};
use crate::error::Result;
use crate::math::{self, Mat3, Vec3};
use crate::volume::{sample_with_gradient, Volume};
use crate::xform::{AffineTransform, RigidParams};

/// Loss and analytic gradient of a global transform at one pyramid level.
pub struct GlobalObjective {
    fixed_vals: Vec<f64>,
    offsets: Vec<Vec3>,
    moving: Volume,
    center: Vec3,
    extent: Vec3,
    kind: SimilarityKind,
}

impl GlobalObjective {
    /// `center`/`extent` come from the full-resolution fixed image so that
    /// parameters carry over between pyramid levels. At most `max_samples`
    /// fixed voxels enter the loss (a fixed pseudo-random subset).
    pub fn new(fixed: &Volume, moving: &Volume, center: Vec3, extent: Vec3, kind: SimilarityKind, max_samples: usize) -> Self {
        let g = *fixed.geometry();
        let n = g.len();
        let indices: Vec<usize> = if n <= max_samples {
            (0..n).collect()
        } else {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
            let mut v = rand::seq::index::sample(&mut rng, n, max_samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut fixed_vals = Vec::with_capacity(indices.len());
        let mut offsets = Vec::with_capacity(indices.len());
        for &idx in &indices {
            let c = g.coords(idx);
            let x = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            fixed_vals.push(fixed.data()[idx] as f64);
            offsets.push(math::sub(x, center));
        }
        GlobalObjective { fixed_vals, offsets, moving: moving.clone(), center, extent, kind }
    }

    pub fn len(&self) -> usize {
        self.fixed_vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed_vals.is_empty()
    }

    /// Loss, `dL/dA` and `dL/dt_mm` for `phi(x) = A (x - c) + c + t`.
    pub fn eval_linear(&self, a: &Mat3, t_mm: Vec3) -> (f64, Mat3, Vec3) {
        let mg = *self.moving.geometry();
        let dims = mg.dims;
        let n = self.len();
        let mut warped = vec![0.0; n];
        let mut grads = vec![[0.0; 3]; n];
        for s in 0..n {
            let m = math::mat_vec(a, self.offsets[s]);
            let phi = [
                m[0] + self.center[0] + t_mm[0],
                m[1] + self.center[1] + t_mm[1],
                m[2] + self.center[2] + t_mm[2],
            ];
            let (v, dq) = sample_with_gradient(self.moving.data(), &dims, mg.world_to_voxel(phi));
            warped[s] = v;
            grads[s] = [dq[0] / mg.spacing[0], dq[1] / mg.spacing[1], dq[2] / mg.spacing[2]];
        }
        let mut dl_dw = vec![0.0; n];
        let loss = loss_and_derivative(&self.fixed_vals, &warped, self.kind, &mut dl_dw);
        let mut ga = [[0.0; 3]; 3];
        let mut gt = [0.0; 3];
        for s in 0..n {
            let d = self.offsets[s];
            for i in 0..3 {
                let gi = dl_dw[s] * grads[s][i];
                gt[i] += gi;
                for j in 0..3 {
                    ga[i][j] += gi * d[j];
                }
            }
        }
        (loss, ga, gt)
    }

    fn rigid_from(&self, p: &[f64]) -> RigidParams {
        RigidParams { euler_xyz: [p[0], p[1], p[2]], translation_frac: [p[3], p[4], p[5]] }
    }

    /// Parameters `[angle_x, angle_y, angle_z, tx_frac, ty_frac, tz_frac]`.
    pub fn rigid(&self, p: &[f64], grad: &mut [f64]) -> f64 {
        let rp = self.rigid_from(p);
        let t_mm = [p[3] * self.extent[0], p[4] * self.extent[1], p[5] * self.extent[2]];
        let (loss, ga, gt) = self.eval_linear(&rp.rotation(), t_mm);
        for (k, dr) in rp.rotation_derivatives().iter().enumerate() {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += ga[i][j] * dr[i][j];
                }
            }
            grad[k] = s;
        }
        for a in 0..3 {
            grad[3 + a] = gt[a] * self.extent[a];
        }
        loss
    }

    /// Parameters: the nine matrix entries row-major, then three translation
    /// fractions.
    pub fn affine(&self, p: &[f64], grad: &mut [f64]) -> f64 {
        let a = [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]];
        let t_mm = [p[9] * self.extent[0], p[10] * self.extent[1], p[11] * self.extent[2]];
        let (loss, ga, gt) = self.eval_linear(&a, t_mm);
        for i in 0..3 {
            for j in 0..3 {
                grad[3 * i + j] = ga[i][j];
            }
        }
        for k in 0..3 {
            grad[9 + k] = gt[k] * self.extent[k];
        }
        loss
    }

    pub fn affine_params(t: &AffineTransform, center: Vec3, extent: Vec3) -> Vec<f64> {
        let t = t.recentered(center);
        let mut p = Vec::with_capacity(12);
        for row in &t.matrix {
            p.extend_from_slice(row);
        }
        for a in 0..3 {
            p.push(t.translation_mm[a] / extent[a]);
        }
        p
    }

    pub fn affine_from_params(p: &[f64], center: Vec3, extent: Vec3) -> AffineTransform {
        AffineTransform {
            matrix: [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]],
            translation_mm: [p[9] * extent[0], p[10] * extent[1], p[11] * extent[2]],
            center,
        }
    }
}

/// Result of a rigid or affine stage.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalStage {
    pub transform: AffineTransform,
    pub loss_trace: Vec<f64>,
}

/// Rigid registration; `fixed` and `moving` are expected in `[0, 1]`.
pub fn register_rigid(fixed: &Volume, moving: &Volume, cfg: &RegConfig) -> Result<GlobalStage> {
    cfg.validate()?;
    let center = fixed.geometry().center();
    let extent = fixed.geometry().extent();
    let mut params = vec![0.0; 6];
    let mut trace = Vec::new();
    for &f in &cfg.pyramid_levels {
        let obj = GlobalObjective::new(&fixed.downsample(f), &moving.downsample(f), center, extent, cfg.loss, cfg.max_samples);
        adam_best("rigid", &mut params, cfg.rigid_iters, cfg.pre_reg_lr, &mut trace, |p, g| obj.rigid(p, g))?;
    }
    let rp = RigidParams { euler_xyz: [params[0], params[1], params[2]], translation_frac: [params[3], params[4], params[5]] };
    Ok(GlobalStage { transform: rp.to_affine(center, extent), loss_trace: trace })
}

/// Affine registration started from `init`.
pub fn register_affine(fixed: &Volume, moving: &Volume, init: &AffineTransform, cfg: &RegConfig) -> Result<GlobalStage> {
    cfg.validate()?;
    let center = fixed.geometry().center();
    let extent = fixed.geometry().extent();
    let mut params = GlobalObjective::affine_params(init, center, extent);
    let mut trace = Vec::new();
    for &f in &cfg.pyramid_levels {
        let obj = GlobalObjective::new(&fixed.downsample(f), &moving.downsample(f), center, extent, cfg.loss, cfg.max_samples);
        adam_best("affine", &mut params, cfg.affine_iters, cfg.pre_reg_lr, &mut trace, |p, g| obj.affine(p, g))?;
    }
    Ok(GlobalStage { transform: GlobalObjective::affine_from_params(&params, center, extent), loss_trace: trace })
}
