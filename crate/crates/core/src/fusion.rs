//! Adaptive fusion of the warped atlas mask with a backend prediction.
//!
//! A gain map `K = sigmoid(w . P + b)` is computed from six max-pooled views
//! `P` of the two inputs (atlas and backend, kernels 3/5/7), and the output is
//! `(1 - K) * m_fm + K * m_atlas`. The seven gate parameters are fitted on
//! pseudo-queries built from the annotated support example, then a safeguard
//! picks the best of the fitted gate, pure backend and pure atlas.

use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, SegmentRequest};
use crate::error::{Error, Result};
use crate::math::{pairwise_sum, sigmoid};
use crate::phantom::smooth_random_field;
use crate::prompting::{make_prompt, PromptKind};
use crate::registration::{register_pipeline, RegConfig};
use crate::volume::{Geometry, LabelMask, ProbMask, Volume};
use crate::xform::{warp_mask, warp_volume, AffineTransform, MaskInterp};

pub const KERNELS: [usize; 3] = [3, 5, 7];

/// Bias that drives the gate to exactly 0 or 1 after saturation.
pub const SATURATED_BIAS: f64 = 40.0;

fn max_along(src: &[f32], dst: &mut [f32], dims: [usize; 3], axis: usize, k: usize) {
    let r = k / 2;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    for (idx, out) in dst.iter_mut().enumerate() {
        let pos = (idx / stride) % n;
        let base = idx - pos * stride;
        let lo = pos.saturating_sub(r);
        let hi = (pos + r).min(n - 1);
        let mut m = f32::NEG_INFINITY;
        for q in lo..=hi {
            m = m.max(src[base + q * stride]);
        }
        *out = m;
    }
}

fn maxpool_raw(data: &[f32], dims: [usize; 3], k: usize) -> Vec<f32> {
    let mut a = data.to_vec();
    let mut b = vec![0.0; data.len()];
    for axis in 0..3 {
        max_along(&a, &mut b, dims, axis, k);
        core::mem::swap(&mut a, &mut b);
    }
    a
}

/// Stride-1 sliding-window maximum with an odd cubic window clamped to the grid.
pub fn maxpool3d(m: &ProbMask, k: usize) -> Result<ProbMask> {
    if k % 2 == 0 {
        return Err(Error::InvalidConfig(alloc::format!("max-pool kernel must be odd, got {k}")));
    }
    Ok(ProbMask::from_raw(*m.geometry(), maxpool_raw(m.data(), m.geometry().dims, k)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FusionParams {
    /// Weights for atlas pooled at 3, 5, 7, then backend pooled at 3, 5, 7.
    pub w: [f64; 6],
    pub b: f64,
}

impl FusionParams {
    /// Gate saturated at 0: output is the backend prediction.
    pub fn fm_only() -> Self {
        FusionParams { w: [0.0; 6], b: -SATURATED_BIAS }
    }

    /// Gate saturated at 1: output is the warped atlas.
    pub fn atlas_only() -> Self {
        FusionParams { w: [0.0; 6], b: SATURATED_BIAS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.iter().chain(core::iter::once(&self.b)).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("fusion parameters must be finite".into()))
        }
    }

    fn as_array(&self) -> [f64; 7] {
        let w = self.w;
        [w[0], w[1], w[2], w[3], w[4], w[5], self.b]
    }

    fn from_array(a: &[f64; 7]) -> Self {
        FusionParams { w: [a[0], a[1], a[2], a[3], a[4], a[5]], b: a[6] }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum GateMode {
    #[default]
    PerVoxel,
    /// One gain for the whole volume, from the means of the pooled maps.
    Scalar,
}

/// The six pooled maps of an (atlas, backend) pair.
#[derive(Clone, Debug)]
pub struct PooledInputs {
    geom: Geometry,
    maps: [Vec<f32>; 6],
}

impl PooledInputs {
    pub fn new(m_atlas: &ProbMask, m_fm: &ProbMask) -> Result<Self> {
        let g = *m_atlas.geometry();
        g.check_same(m_fm.geometry(), "fusion inputs")?;
        let pool = |m: &ProbMask, k| maxpool_raw(m.data(), g.dims, k);
        Ok(PooledInputs {
            geom: g,
            maps: [
                pool(m_atlas, KERNELS[0]),
                pool(m_atlas, KERNELS[1]),
                pool(m_atlas, KERNELS[2]),
                pool(m_fm, KERNELS[0]),
                pool(m_fm, KERNELS[1]),
                pool(m_fm, KERNELS[2]),
            ],
        })
    }

    #[inline]
    fn features(&self, idx: usize) -> [f64; 6] {
        core::array::from_fn(|i| f64::from(self.maps[i][idx]))
    }

    fn means(&self) -> [f64; 6] {
        core::array::from_fn(|i| {
            let v: Vec<f64> = self.maps[i].iter().map(|&x| f64::from(x)).collect();
            pairwise_sum(&v) / v.len() as f64
        })
    }
}

#[inline]
fn logit(p: &FusionParams, f: &[f64; 6]) -> f64 {
    let mut z = p.b;
    for i in 0..6 {
        z += p.w[i] * f[i];
    }
    z
}

/// Sigmoid snapped to exactly 0 or 1 once it is within f32 epsilon of either.
#[inline]
fn saturated_gain(z: f64) -> f32 {
    let k = sigmoid(z);
    let eps = f64::from(f32::EPSILON);
    if k < eps {
        0.0
    } else if k > 1.0 - eps {
        1.0
    } else {
        k as f32
    }
}

/// Gain map on the input grid.
pub fn kalman_gain(m_atlas: &ProbMask, m_fm: &ProbMask, p: &FusionParams, mode: GateMode) -> Result<ProbMask> {
    p.validate()?;
    let pooled = PooledInputs::new(m_atlas, m_fm)?;
    let g = pooled.geom;
    let data = match mode {
        GateMode::PerVoxel => (0..g.len()).map(|idx| saturated_gain(logit(p, &pooled.features(idx)))).collect(),
        GateMode::Scalar => vec![saturated_gain(logit(p, &pooled.means())); g.len()],
    };
    Ok(ProbMask::from_raw(g, data))
}

/// `(1 - K) * m_fm + K * m_atlas`, clamped to the pair's range against
/// rounding.
pub fn fuse(m_atlas: &ProbMask, m_fm: &ProbMask, k: &ProbMask) -> Result<ProbMask> {
    let g = *m_atlas.geometry();
    g.check_same(m_fm.geometry(), "fusion inputs")?;
    g.check_same(k.geometry(), "fusion gain")?;
    let data = m_atlas
        .data()
        .iter()
        .zip(m_fm.data())
        .zip(k.data())
        .map(|((&a, &f), &k)| ((1.0 - k) * f + k * a).clamp(a.min(f), a.max(f)))
        .collect();
    Ok(ProbMask::from_raw(g, data))
}

pub fn fuse_with(m_atlas: &ProbMask, m_fm: &ProbMask, p: &FusionParams, mode: GateMode) -> Result<ProbMask> {
    let k = kalman_gain(m_atlas, m_fm, p, mode)?;
    fuse(m_atlas, m_fm, &k)
}

pub fn binarize(m: &ProbMask, thresh: f32) -> LabelMask {
    m.threshold(thresh)
}

fn soft_dice_parts(pred: &[f64], gt: &[bool], eps: f64) -> (f64, f64, f64) {
    let s = pairwise_sum(pred);
    let inter: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| if g { p } else { 0.0 }).collect();
    let i = pairwise_sum(&inter);
    let gsum = gt.iter().filter(|&&g| g).count() as f64;
    (2.0 * i + eps, s + gsum + eps, gsum)
}

/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` and its gradient with
/// respect to every prediction voxel.
pub fn soft_dice_loss(pred: &ProbMask, gt: &LabelMask, eps: f64) -> Result<(f64, Vec<f64>)> {
    pred.geometry().check_same(gt.geometry(), "soft dice")?;
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("dice eps must be positive".into()));
    }
    let p: Vec<f64> = pred.data().iter().map(|&v| f64::from(v)).collect();
    let g: Vec<bool> = gt.labels().iter().map(|&l| l != 0).collect();
    let (num, den, _) = soft_dice_parts(&p, &g, eps);
    let grad = g.iter().map(|&g| -(if g { 2.0 * den } else { 0.0 } - num) / (den * den)).collect();
    Ok((1.0 - num / den, grad))
}

/// Support-set soft Dice of a fused output.
fn soft_dice(pred: &ProbMask, gt: &LabelMask, eps: f64) -> Result<f64> {
    soft_dice_loss(pred, gt, eps).map(|(l, _)| 1.0 - l)
}

/// One fitting example: warped atlas, backend output and truth on one grid.
#[derive(Clone, Debug)]
pub struct FusionTriplet {
    pub atlas: ProbMask,
    pub fm: ProbMask,
    pub gt: LabelMask,
}

/// Voxels where the two inputs agree do not depend on the gate, so they are
/// folded into constants and only disagreement voxels are iterated.
struct Prepared {
    feats: Vec<[f64; 6]>,
    means: [f64; 6],
    atlas: Vec<f64>,
    fm: Vec<f64>,
    gt: Vec<bool>,
    const_sum: f64,
    const_inter: f64,
    gt_sum: f64,
}

/// Summed soft-Dice loss over triplets as a function of the gate parameters.
pub struct FusionObjective {
    prepared: Vec<Prepared>,
    mode: GateMode,
    eps: f64,
}

impl FusionObjective {
    pub fn new(triplets: &[FusionTriplet], mode: GateMode, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig("dice eps must be positive".into()));
        }
        let mut prepared = Vec::with_capacity(triplets.len());
        for t in triplets {
            t.atlas.geometry().check_same(t.gt.geometry(), "fusion triplet")?;
            let pooled = PooledInputs::new(&t.atlas, &t.fm)?;
            let (a, f, gl) = (t.atlas.data(), t.fm.data(), t.gt.labels());
            let mut p = Prepared {
                feats: Vec::new(),
                means: pooled.means(),
                atlas: Vec::new(),
                fm: Vec::new(),
                gt: Vec::new(),
                const_sum: 0.0,
                const_inter: 0.0,
                gt_sum: gl.iter().filter(|&&l| l != 0).count() as f64,
            };
            let mut agree = Vec::new();
            let mut agree_inter = Vec::new();
            for idx in 0..a.len() {
                if a[idx] == f[idx] {
                    agree.push(f64::from(f[idx]));
                    agree_inter.push(if gl[idx] != 0 { f64::from(f[idx]) } else { 0.0 });
                } else {
                    p.feats.push(pooled.features(idx));
                    p.atlas.push(f64::from(a[idx]));
                    p.fm.push(f64::from(f[idx]));
                    p.gt.push(gl[idx] != 0);
                }
            }
            p.const_sum = pairwise_sum(&agree);
            p.const_inter = pairwise_sum(&agree_inter);
            prepared.push(p);
        }
        Ok(FusionObjective { prepared, mode, eps })
    }

    /// Loss and gradient `[dw0..dw5, db]`, using the unsaturated sigmoid so
    /// the objective stays smooth.
    pub fn eval(&self, params: &FusionParams) -> (f64, [f64; 7]) {
        let mut loss = 0.0;
        let mut grad = [0.0; 7];
        for p in &self.prepared {
            let n = p.atlas.len();
            let gains: Vec<f64> = match self.mode {
                GateMode::PerVoxel => p.feats.iter().map(|f| sigmoid(logit(params, f))).collect(),
                GateMode::Scalar => vec![sigmoid(logit(params, &p.means)); n],
            };
            let pred: Vec<f64> = (0..n).map(|i| p.fm[i] + gains[i] * (p.atlas[i] - p.fm[i])).collect();
            let inter: Vec<f64> = (0..n).map(|i| if p.gt[i] { pred[i] } else { 0.0 }).collect();
            let num = 2.0 * (p.const_inter + pairwise_sum(&inter)) + self.eps;
            let den = p.const_sum + pairwise_sum(&pred) + p.gt_sum + self.eps;
            loss += 1.0 - num / den;
            let mut scalar_dz = 0.0;
            for i in 0..n {
                let dl_dm = -(if p.gt[i] { 2.0 * den } else { 0.0 } - num) / (den * den);
                let dz = dl_dm * (p.atlas[i] - p.fm[i]) * gains[i] * (1.0 - gains[i]);
                match self.mode {
                    GateMode::PerVoxel => {
                        for (g, f) in grad.iter_mut().zip(&p.feats[i]) {
                            *g += dz * f;
                        }
                        grad[6] += dz;
                    }
                    GateMode::Scalar => scalar_dz += dz,
                }
            }
            if self.mode == GateMode::Scalar {
                for (g, m) in grad.iter_mut().zip(&p.means) {
                    *g += scalar_dz * m;
                }
                grad[6] += scalar_dz;
            }
        }
        (loss, grad)
    }

    /// Plain gradient descent from `init`.
    pub fn descend(&self, init: FusionParams, lr: f64, iters: usize) -> Result<FusionParams> {
        let mut x = init.as_array();
        for it in 0..iters {
            let (l, g) = self.eval(&FusionParams::from_array(&x));
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { stage: "fusion", iteration: it });
            }
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= lr * gi;
            }
        }
        Ok(FusionParams::from_array(&x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Candidate {
    Fitted,
    FmOnly,
    AtlasOnly,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FitOutcome {
    pub params: FusionParams,
    pub chosen: Candidate,
    /// Mean support soft Dice of the chosen parameters.
    pub support_dice: f64,
    /// Mean support soft Dice of fitted (if any), backend-only and atlas-only.
    pub fitted_dice: Option<f64>,
    pub fm_only_dice: f64,
    pub atlas_only_dice: f64,
}

fn mean_support_dice(triplets: &[FusionTriplet], p: &FusionParams, mode: GateMode, eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for t in triplets {
        total += soft_dice(&fuse_with(&t.atlas, &t.fm, p, mode)?, &t.gt, eps)?;
    }
    Ok(total / triplets.len() as f64)
}

/// Keeps the fitted gate only if it is at least as good as both saturated
/// gates on the support triplets.
pub fn safeguard(triplets: &[FusionTriplet], fitted: Option<FusionParams>, mode: GateMode, eps: f64) -> Result<FitOutcome> {
    if triplets.is_empty() {
        return Err(Error::InvalidConfig("fusion fitting needs at least one triplet".into()));
    }
    let fm_only_dice = mean_support_dice(triplets, &FusionParams::fm_only(), mode, eps)?;
    let atlas_only_dice = mean_support_dice(triplets, &FusionParams::atlas_only(), mode, eps)?;
    let fitted_dice = fitted.map(|p| mean_support_dice(triplets, &p, mode, eps)).transpose()?;
    let mut best = (FusionParams::fm_only(), Candidate::FmOnly, fm_only_dice);
    if atlas_only_dice > best.2 {
        best = (FusionParams::atlas_only(), Candidate::AtlasOnly, atlas_only_dice);
    }
    if let (Some(p), Some(d)) = (fitted, fitted_dice) {
        if d >= best.2 {
            best = (p, Candidate::Fitted, d);
        }
    }
    Ok(FitOutcome { params: best.0, chosen: best.1, support_dice: best.2, fitted_dice, fm_only_dice, atlas_only_dice })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AugConfig {
    pub max_disp_vox: f64,
    pub smooth_sigma_vox: f64,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { max_disp_vox: 6.0, smooth_sigma_vox: 8.0, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PseudoQueryMode {
    /// Smoothly warped copies of the support.
    #[default]
    Augmented,
    /// The support itself, registered to itself.
    SelfAsQuery,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FitConfig {
    pub lr: f64,
    pub iters: usize,
    pub n_pseudo_queries: usize,
    pub aug: AugConfig,
    pub dice_eps: f64,
    pub pseudo_query: PseudoQueryMode,
    pub gate: GateMode,
    /// Prompt handed to the backend; `None` for non-promptable backends.
    pub prompt: Option<PromptKind>,
    pub context_label: u16,
    pub mask_interp: MaskInterp,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lr: 20.0,
            iters: 100,
            n_pseudo_queries: 3,
            aug: AugConfig::default(),
            dice_eps: 1.0,
            pseudo_query: PseudoQueryMode::Augmented,
            gate: GateMode::PerVoxel,
            prompt: Some(PromptKind::Mask),
            context_label: 1,
            mask_interp: MaskInterp::Nearest,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("fusion lr must be positive");
        }
        if !(self.dice_eps > 0.0) {
            return bad("dice eps must be positive");
        }
        if self.n_pseudo_queries == 0 && self.pseudo_query == PseudoQueryMode::Augmented {
            return bad("n_pseudo_queries must be at least 1");
        }
        if !(self.aug.max_disp_vox >= 0.0 && self.aug.smooth_sigma_vox > 0.0) {
            return bad("augmentation needs max_disp_vox >= 0 and smooth_sigma_vox > 0");
        }
        Ok(())
    }
}

/// Registers the atlas to `query`, prompts the backend from the warped label
/// and returns both predictions.
pub fn predict_pair(
    atlas_img: &Volume,
    atlas_mask: &LabelMask,
    query: &Volume,
    reference: Option<&LabelMask>,
    backend: &dyn Backend,
    reg_cfg: &RegConfig,
    prompt: Option<PromptKind>,
    context_label: u16,
    mask_interp: MaskInterp,
) -> Result<(ProbMask, ProbMask)> {
    let reg = register_pipeline(atlas_img, atlas_mask, query, reg_cfg, mask_interp)?;
    let warped = reg.warped_mask.expect("pipeline warps the mask").binarized();
    let prompt = match prompt {
        Some(kind) => {
            let mut p = make_prompt(&warped, kind, 1)?;
            p.context_label = context_label;
            Some(p)
        }
        None => None,
    };
    let fm = backend.segment(&SegmentRequest { query, prompt: prompt.as_ref(), reference })?;
    fm.geometry().check_same(query.geometry(), "backend output")?;
    Ok((warped.to_prob(), fm))
}

/// Pseudo-query images with their label maps.
fn pseudo_queries(support_img: &Volume, mask: &LabelMask, cfg: &FitConfig) -> Result<Vec<(Volume, LabelMask)>> {
    let g = *support_img.geometry();
    Ok(match cfg.pseudo_query {
        PseudoQueryMode::SelfAsQuery => vec![(support_img.clone(), mask.clone())],
        PseudoQueryMode::Augmented => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.aug.seed);
            let identity = AffineTransform::identity(g.center());
            let mut out = Vec::with_capacity(cfg.n_pseudo_queries);
            for _ in 0..cfg.n_pseudo_queries {
                let field = smooth_random_field(&g, cfg.aug.max_disp_vox, cfg.aug.smooth_sigma_vox, rng.next_u64())?;
                out.push((
                    warp_volume(support_img, &identity, Some(&field), &g),
                    warp_mask(mask, &identity, Some(&field), &g, MaskInterp::Nearest),
                ));
            }
            out
        }
    })
}

/// Support triplets for several contexts of one labelled support example,
/// one list per entry of `labels`. Each pseudo-query is registered once and
/// shared by every context. `cfg.context_label` is ignored.
pub fn support_triplets_multi(
    support_img: &Volume,
    support_mask: &LabelMask,
    labels: &[u16],
    backend: &dyn Backend,
    reg_cfg: &RegConfig,
    cfg: &FitConfig,
) -> Result<Vec<Vec<FusionTriplet>>> {
    cfg.validate()?;
    support_img.geometry().check_same(support_mask.geometry(), "support image and mask")?;
    if labels.is_empty() || labels.contains(&0) {
        return Err(Error::InvalidConfig("support contexts must be non-empty and exclude label 0".into()));
    }
    let mut out = vec![Vec::new(); labels.len()];
    for (q, gt) in pseudo_queries(support_img, support_mask, cfg)? {
        let reg = register_pipeline(support_img, support_mask, &q, reg_cfg, cfg.mask_interp)?;
        let warped = reg.warped_mask.expect("pipeline warps the mask");
        for (slot, &label) in out.iter_mut().zip(labels) {
            let prompt = cfg.prompt.map(|kind| make_prompt(&warped, kind, label)).transpose()?;
            let reference = gt.select(label);
            let fm = backend.segment(&SegmentRequest { query: &q, prompt: prompt.as_ref(), reference: Some(&reference) })?;
            fm.geometry().check_same(q.geometry(), "backend output")?;
            slot.push(FusionTriplet { atlas: warped.select(label).to_prob(), fm, gt: reference });
        }
    }
    Ok(out)
}

/// Support triplets for the whole foreground of `support_mask`, prompted as
/// `cfg.context_label`.
pub fn support_triplets(
    support_img: &Volume,
    support_mask: &LabelMask,
    backend: &dyn Backend,
    reg_cfg: &RegConfig,
    cfg: &FitConfig,
) -> Result<Vec<FusionTriplet>> {
    let label = cfg.context_label;
    let relabeled = LabelMask::new(*support_mask.geometry(), support_mask.labels().iter().map(|&l| if l != 0 { label } else { 0 }).collect())?;
    let mut per_label = support_triplets_multi(support_img, &relabeled, &[label], backend, reg_cfg, cfg)?;
    Ok(per_label.pop().expect("one label requested"))
}

/// Fits the gate on pseudo-queries of the support example, then applies the
/// safeguard. With `iters == 0` only the two saturated gates compete.
pub fn fit_fusion(
    support_img: &Volume,
    support_mask: &LabelMask,
    backend: &dyn Backend,
    reg_cfg: &RegConfig,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    let triplets = support_triplets(support_img, support_mask, backend, reg_cfg, cfg)?;
    fit_on_triplets(&triplets, cfg)
}

/// `fit_fusion` for several contexts sharing the pseudo-query registrations.
pub fn fit_fusion_multi(
    support_img: &Volume,
    support_mask: &LabelMask,
    labels: &[u16],
    backend: &dyn Backend,
    reg_cfg: &RegConfig,
    cfg: &FitConfig,
) -> Result<Vec<FitOutcome>> {
    support_triplets_multi(support_img, support_mask, labels, backend, reg_cfg, cfg)?.iter().map(|t| fit_on_triplets(t, cfg)).collect()
}

pub fn fit_on_triplets(triplets: &[FusionTriplet], cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let fitted = if cfg.iters > 0 {
        let obj = FusionObjective::new(triplets, cfg.gate, cfg.dice_eps)?;
        Some(obj.descend(FusionParams::default(), cfg.lr, cfg.iters)?)
    } else {
        None
    };
    safeguard(triplets, fitted, cfg.gate, cfg.dice_eps)
}
