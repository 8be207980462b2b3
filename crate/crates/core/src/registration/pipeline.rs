use alloc::vec::Vec;

use super::{register_affine, register_deformable, register_rigid, RegConfig};
use crate::error::Result;
use crate::volume::{normalize_intensity, LabelMask, Volume, DEFAULT_HI_PERCENTILE, DEFAULT_LO_PERCENTILE};
use crate::xform::{warp_mask, warp_volume, AffineTransform, DisplacementField, MaskInterp};

/// Per-stage loss values, one entry per evaluated iterate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rigid: Vec<f64>,
    pub affine: Vec<f64>,
    pub deform: Vec<f64>,
}

impl LossTrace {
    /// `(stage, iteration, loss)` rows in stage order.
    pub fn rows(&self) -> impl Iterator<Item = (&'static str, usize, f64)> + '_ {
        let tag = |name: &'static str, v: &'_ [f64]| v.iter().enumerate().map(move |(i, &l)| (name, i, l)).collect::<Vec<_>>();
        tag("rigid", &self.rigid).into_iter().chain(tag("affine", &self.affine)).chain(tag("deform", &self.deform))
    }

    pub fn is_finite(&self) -> bool {
        self.rows().all(|(_, _, l)| l.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Composed pre-alignment (rigid then affine), centered on the fixed image.
    pub affine: AffineTransform,
    /// Deformable residual; `None` when the stage is disabled.
    pub field: Option<DisplacementField>,
    /// Moving image resampled into fixed space (original intensities).
    pub warped_image: Volume,
    pub warped_mask: Option<LabelMask>,
    pub loss_trace: LossTrace,
    /// Deformable-stage total loss before and after optimization.
    pub deform_losses: Option<(f64, f64)>,
}

/// Registers `moving` onto `fixed` and resamples it.
pub fn register_images(fixed: &Volume, moving: &Volume, cfg: &RegConfig) -> Result<RegistrationResult> {
    run(fixed, moving, None, cfg, MaskInterp::Nearest)
}

/// Registers the atlas image onto the query and carries the atlas labels
/// along; `warped_mask` is always `Some`.
pub fn register_pipeline(
    atlas_img: &Volume,
    atlas_mask: &LabelMask,
    query: &Volume,
    cfg: &RegConfig,
    mask_interp: MaskInterp,
) -> Result<RegistrationResult> {
    atlas_img.geometry().check_same(atlas_mask.geometry(), "atlas image and atlas mask")?;
    run(query, atlas_img, Some(atlas_mask), cfg, mask_interp)
}

fn run(fixed: &Volume, moving: &Volume, mask: Option<&LabelMask>, cfg: &RegConfig, mask_interp: MaskInterp) -> Result<RegistrationResult> {
    cfg.validate()?;
    let target = *fixed.geometry();
    let center = target.center();
    let (f, m) = if cfg.normalize {
        (
            normalize_intensity(fixed, DEFAULT_LO_PERCENTILE, DEFAULT_HI_PERCENTILE)?,
            normalize_intensity(moving, DEFAULT_LO_PERCENTILE, DEFAULT_HI_PERCENTILE)?,
        )
    } else {
        (fixed.clone(), moving.clone())
    };
    let mut trace = LossTrace::default();
    let mut affine = AffineTransform::identity(center);
    if cfg.enable_rigid {
        let st = register_rigid(&f, &m, cfg)?;
        affine = st.transform;
        trace.rigid = st.loss_trace;
    }
    if cfg.enable_affine {
        let st = register_affine(&f, &m, &affine, cfg)?;
        affine = st.transform;
        trace.affine = st.loss_trace;
    }
    let mut field = None;
    let mut deform_losses = None;
    if cfg.enable_deform {
        let st = register_deformable(&f, &m, &affine, cfg)?;
        trace.deform = st.loss_trace;
        deform_losses = Some((st.initial_loss, st.final_loss));
        field = Some(st.field);
    }
    let warped_image = warp_volume(moving, &affine, field.as_ref(), &target);
    let warped_mask = mask.map(|l| warp_mask(l, &affine, field.as_ref(), &target, mask_interp));
    Ok(RegistrationResult { affine, field, warped_image, warped_mask, loss_trace: trace, deform_losses })
}
