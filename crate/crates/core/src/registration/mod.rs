//! Test-time registration of an atlas to a query: rigid, then affine, then a
//! dense displacement field, each minimizing an image dissimilarity with Adam
//! and analytic gradients.

mod deformable;
mod global;
mod pipeline;
mod similarity;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use deformable::{register_deformable, DeformObjective, DeformStage};
pub use global::{register_affine, register_rigid, GlobalObjective, GlobalStage};
pub use pipeline::{register_images, register_pipeline, LossTrace, RegistrationResult};
pub use similarity::{similarity_loss, SimilarityKind};

/// Registration schedule and ablation switches.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RegConfig {
    /// Mean-pooling factors for rigid/affine, coarse to fine.
    pub pyramid_levels: Vec<usize>,
    /// Adam iterations per pyramid level.
    pub rigid_iters: usize,
    pub affine_iters: usize,
    /// Pooling factors at which the displacement field is optimized.
    pub deform_levels: Vec<usize>,
    /// Iterations at the coarsest deformable level; halved at each finer one.
    pub deform_iters: usize,
    /// Adam step size for the field, in control-grid voxels.
    pub deform_lr: f64,
    pub pre_reg_lr: f64,
    /// Weight of the smoothness energy (per mm^2).
    pub smooth_lambda: f64,
    pub loss: SimilarityKind,
    pub enable_rigid: bool,
    pub enable_affine: bool,
    pub enable_deform: bool,
    /// Image voxels per control-grid cell at full resolution.
    pub grid_factor: usize,
    /// Cap on voxels used by the rigid/affine loss at one level.
    pub max_samples: usize,
    /// Percentile-normalize both images before registering.
    pub normalize: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            pyramid_levels: vec![4, 2, 1],
            rigid_iters: 300,
            affine_iters: 300,
            deform_levels: vec![4, 2],
            deform_iters: 1000,
            deform_lr: 0.05,
            pre_reg_lr: 1e-2,
            smooth_lambda: 0.01,
            loss: SimilarityKind::Mse,
            enable_rigid: true,
            enable_affine: true,
            enable_deform: true,
            grid_factor: 2,
            max_samples: 32_768,
            normalize: true,
        }
    }
}

impl RegConfig {
    /// Everything off: the pipeline degenerates to identity resampling.
    pub fn disabled() -> Self {
        RegConfig { enable_rigid: false, enable_affine: false, enable_deform: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let descending = |levels: &[usize]| levels.iter().all(|&f| f >= 1) && levels.windows(2).all(|w| w[0] > w[1]);
        if self.pyramid_levels.is_empty() || !descending(&self.pyramid_levels) {
            return Err(Error::InvalidConfig(format!("pyramid_levels must be positive and descending, got {:?}", self.pyramid_levels)));
        }
        if self.deform_levels.is_empty() || !descending(&self.deform_levels) {
            return Err(Error::InvalidConfig(format!("deform_levels must be positive and descending, got {:?}", self.deform_levels)));
        }
        if !(self.deform_lr > 0.0) || !(self.pre_reg_lr > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.smooth_lambda >= 0.0) || !self.smooth_lambda.is_finite() {
            return Err(Error::InvalidConfig("smooth_lambda must be finite and >= 0".into()));
        }
        if self.grid_factor == 0 || self.max_samples == 0 {
            return Err(Error::InvalidConfig("grid_factor and max_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Best-iterate Adam loop shared by every stage. Evaluates `iters + 1`
/// points and returns the parameters with the lowest objective.
pub(crate) fn adam_best(
    stage: &'static str,
    params: &mut Vec<f64>,
    iters: usize,
    lr: f64,
    trace: &mut Vec<f64>,
    mut eval: impl FnMut(&[f64], &mut [f64]) -> f64,
) -> Result<f64> {
    let mut opt = crate::optim::Adam::new(params.len(), lr);
    let mut grad = vec![0.0; params.len()];
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    for it in 0..=iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = eval(params, &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { stage, iteration: it });
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(params);
        }
        if it == iters {
            break;
        }
        opt.step(params, &grad);
    }
    params.copy_from_slice(&best);
    Ok(best_loss)
}
