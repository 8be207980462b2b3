//! Dense deformable stage: a displacement field on a control grid, optimized
//! directly by Adam over a short pyramid.
//!
//! Parameters are the control displacements expressed in control-grid voxels
//! (`u_mm = v * spacing`), which keeps the step size independent of the
//! physical spacing.

use alloc::vec;
use alloc::vec::Vec;

use super::similarity::loss_and_derivative;
use super::{adam_best, RegConfig, SimilarityKind};
use crate::error::Result;
use crate::math::Vec3;
use crate::volume::{sample_with_gradient, Geometry, Volume};
use crate::xform::{smoothness_energy_and_gradient, AffineTransform, CellWeights, DisplacementField};

/// Similarity plus weighted smoothness as a function of the control
/// displacements, with its exact gradient.
pub struct DeformObjective {
    fixed_vals: Vec<f64>,
    base: Vec<Vec3>,
    cells: Vec<CellWeights>,
    moving: Volume,
    control: Geometry,
    lambda: f64,
    kind: SimilarityKind,
}

impl DeformObjective {
    pub fn new(fixed: &Volume, moving: &Volume, pre: &AffineTransform, control: Geometry, lambda: f64, kind: SimilarityKind) -> Self {
        let g = *fixed.geometry();
        let mg = *moving.geometry();
        let mut base = Vec::with_capacity(g.len());
        let mut cells = Vec::with_capacity(g.len());
        for idx in 0..g.len() {
            let c = g.coords(idx);
            let x = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            base.push(mg.world_to_voxel(pre.apply(x)));
            cells.push(DisplacementField::weights(&control, x));
        }
        let fixed_vals = fixed.data().iter().map(|&v| v as f64).collect();
        DeformObjective { fixed_vals, base, cells, moving: moving.clone(), control, lambda, kind }
    }

    pub fn control(&self) -> &Geometry {
        &self.control
    }

    /// Number of scalar parameters (three per control point).
    pub fn n_params(&self) -> usize {
        3 * self.control.len()
    }

    pub fn params_from_field(&self, field: &DisplacementField) -> Result<Vec<f64>> {
        let f = field.resampled(&self.control)?;
        let s = self.control.spacing;
        Ok(f.values().iter().flat_map(|u| [u[0] / s[0], u[1] / s[1], u[2] / s[2]]).collect())
    }

    pub fn field_from_params(&self, p: &[f64]) -> Result<DisplacementField> {
        DisplacementField::new(self.control, self.to_mm(p))
    }

    fn to_mm(&self, p: &[f64]) -> Vec<Vec3> {
        let s = self.control.spacing;
        p.chunks_exact(3).map(|v| [v[0] * s[0], v[1] * s[1], v[2] * s[2]]).collect()
    }

    /// Similarity term alone for the given parameters.
    pub fn similarity(&self, p: &[f64]) -> f64 {
        let u = self.to_mm(p);
        let warped = self.sample(&u, None);
        let mut scratch = vec![0.0; warped.len()];
        loss_and_derivative(&self.fixed_vals, &warped, self.kind, &mut scratch)
    }

    fn sample(&self, u: &[Vec3], mut grads: Option<&mut Vec<Vec3>>) -> Vec<f64> {
        let mg = *self.moving.geometry();
        let dims = mg.dims;
        let inv = [1.0 / mg.spacing[0], 1.0 / mg.spacing[1], 1.0 / mg.spacing[2]];
        let mut warped = Vec::with_capacity(self.base.len());
        for (b, cw) in self.base.iter().zip(&self.cells) {
            let d = DisplacementField::interpolate(u, cw);
            let q = [b[0] + d[0] * inv[0], b[1] + d[1] * inv[1], b[2] + d[2] * inv[2]];
            let (v, dq) = sample_with_gradient(self.moving.data(), &dims, q);
            warped.push(v);
            if let Some(g) = grads.as_deref_mut() {
                g.push([dq[0] * inv[0], dq[1] * inv[1], dq[2] * inv[2]]);
            }
        }
        warped
    }

    /// Total loss; the gradient with respect to `p` is written to `grad`.
    pub fn eval(&self, p: &[f64], grad: &mut [f64]) -> f64 {
        let u = self.to_mm(p);
        let mut img_grad = Vec::with_capacity(self.base.len());
        let warped = self.sample(&u, Some(&mut img_grad));
        let mut dl_dw = vec![0.0; warped.len()];
        let sim = loss_and_derivative(&self.fixed_vals, &warped, self.kind, &mut dl_dw);

        let mut gu = vec![[0.0; 3]; u.len()];
        for ((cw, g), &d) in self.cells.iter().zip(&img_grad).zip(&dl_dw) {
            if d == 0.0 {
                continue;
            }
            let e = [d * g[0], d * g[1], d * g[2]];
            for n in 0..8 {
                let w = cw.w[n];
                if w != 0.0 {
                    let t = &mut gu[cw.idx[n]];
                    t[0] += w * e[0];
                    t[1] += w * e[1];
                    t[2] += w * e[2];
                }
            }
        }
        let mut loss = sim;
        if self.lambda > 0.0 {
            let mut gs = vec![[0.0; 3]; u.len()];
            loss += self.lambda * smoothness_energy_and_gradient(&self.control, &u, Some(&mut gs));
            for (a, b) in gu.iter_mut().zip(&gs) {
                for c in 0..3 {
                    a[c] += self.lambda * b[c];
                }
            }
        }
        let s = self.control.spacing;
        for (i, g) in gu.iter().enumerate() {
            grad[3 * i] = g[0] * s[0];
            grad[3 * i + 1] = g[1] * s[1];
            grad[3 * i + 2] = g[2] * s[2];
        }
        loss
    }
}

/// Result of the deformable stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformStage {
    /// Field on the full-resolution control grid of the fixed image.
    pub field: DisplacementField,
    pub loss_trace: Vec<f64>,
    /// Total loss of the zero field and of the returned field, both measured
    /// at the finest optimized level.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Deformable registration of `moving` to `fixed` through `pre`.
pub fn register_deformable(fixed: &Volume, moving: &Volume, pre: &AffineTransform, cfg: &RegConfig) -> Result<DeformStage> {
    cfg.validate()?;
    let full = *fixed.geometry();
    let mut field: Option<DisplacementField> = None;
    let mut trace = Vec::new();
    let mut finest: Option<DeformObjective> = None;
    for (li, &f) in cfg.deform_levels.iter().enumerate() {
        let level_fixed = fixed.downsample(f);
        let level_moving = moving.downsample(f);
        let k = (cfg.grid_factor / f).max(1);
        let control = DisplacementField::control_grid(level_fixed.geometry(), k);
        let obj = DeformObjective::new(&level_fixed, &level_moving, pre, control, cfg.smooth_lambda, cfg.loss);
        let mut params = match &field {
            Some(fld) => obj.params_from_field(fld)?,
            None => vec![0.0; obj.n_params()],
        };
        let iters = cfg.deform_iters >> li.min(usize::BITS as usize - 1);
        adam_best("deform", &mut params, iters, cfg.deform_lr, &mut trace, |p, g| obj.eval(p, g))?;
        field = Some(obj.field_from_params(&params)?);
        finest = Some(obj);
    }
    let obj = finest.expect("deform_levels is non-empty");
    let mut field = field.expect("deform_levels is non-empty");
    let mut scratch = vec![0.0; obj.n_params()];
    let zero = vec![0.0; obj.n_params()];
    let initial_loss = obj.eval(&zero, &mut scratch);
    let mut final_loss = obj.eval(&obj.params_from_field(&field)?, &mut scratch);
    if final_loss > initial_loss {
        field = DisplacementField::zeros(obj.control)?;
        final_loss = initial_loss;
    }
    let out = field.resampled(&DisplacementField::control_grid(&full, cfg.grid_factor))?;
    Ok(DeformStage { field: out, loss_trace: trace, initial_loss, final_loss })
}
