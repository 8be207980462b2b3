//! End-to-end runs: one case, cross-validation and the ablation lattice.

pub mod ablation;
pub mod crossval;
pub mod report;

use std::fs;
use std::path::Path;
use std::time::Instant;

use atlasfuse_core::backend::{Backend, SegmentRequest};
use atlasfuse_core::fusion::{self, FitOutcome, FusionParams};
use atlasfuse_core::metrics::{ContextMetrics, MetricsReport};
use atlasfuse_core::prompting::make_prompt;
use atlasfuse_core::registration::{register_pipeline, RegistrationResult};
use atlasfuse_core::xform::AffineTransform;
use atlasfuse_core::{LabelMask, ProbMask, Volume};
use serde::{Deserialize, Serialize};

use crate::config::{to_toml, CaseConfig, FusionSource, PipelineConfig};
use crate::error::{Error, Result};
use crate::io;
use report::StageTimings;

/// In-memory inputs of one case.
pub struct CaseInputs {
    pub atlas_image: Volume,
    pub atlas_mask: LabelMask,
    pub query: Volume,
    pub gt: Option<LabelMask>,
}

impl CaseInputs {
    pub fn load(cfg: &CaseConfig) -> Result<Self> {
        Ok(CaseInputs {
            atlas_image: io::read_volume(&cfg.atlas.image)?,
            atlas_mask: io::read_mask(&cfg.atlas.mask)?,
            query: io::read_volume(&cfg.query.image)?,
            gt: cfg.query.gt.as_deref().map(io::read_mask).transpose()?,
        })
    }
}

/// How the gate of one context was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextFusion {
    pub label: u16,
    pub params: FusionParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitOutcome>,
    /// Set when the context fell back to atlas-only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReports {
    pub atlas: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fm: Option<MetricsReport>,
    #[serde(rename = "final")]
    pub final_: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub affine: AffineTransform,
    pub final_losses: [Option<f64>; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deform_losses: Option<(f64, f64)>,
}

impl RegistrationSummary {
    fn new(r: &RegistrationResult) -> Self {
        let t = &r.loss_trace;
        RegistrationSummary {
            affine: r.affine,
            final_losses: [t.rigid.last().copied(), t.affine.last().copied(), t.deform.last().copied()],
            deform_losses: r.deform_losses,
        }
    }
}

pub struct CaseResult {
    pub labels: Vec<u16>,
    pub m_atlas: LabelMask,
    /// `None` without a backend.
    pub m_fm: Option<LabelMask>,
    pub m_final: LabelMask,
    /// `None` without ground truth.
    pub reports: Option<StageReports>,
    pub fusion: Vec<ContextFusion>,
    pub registration: RegistrationSummary,
    pub loss_trace: Vec<(&'static str, usize, f64)>,
    pub timings: StageTimings,
}

/// Writes per-context binary masks into one label map; earlier contexts
/// win overlaps.
pub fn combine_by_priority(parts: &[(u16, LabelMask)]) -> Result<LabelMask> {
    let g = *parts.first().ok_or_else(|| Error::Config("no contexts to combine".into()))?.1.geometry();
    let mut out = vec![0u16; g.len()];
    for (label, m) in parts {
        m.geometry().check_same(&g, "context masks")?;
        for (o, &v) in out.iter_mut().zip(m.labels()) {
            if *o == 0 && v != 0 {
                *o = *label;
            }
        }
    }
    Ok(LabelMask::new(g, out)?)
}

fn fit_seed(cfg: &PipelineConfig) -> u64 {
    cfg.fusion.fit.aug.seed ^ cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Backend prediction for one context, or the reason it is unavailable.
fn backend_prediction(
    backend: &dyn Backend,
    cfg: &PipelineConfig,
    inputs: &CaseInputs,
    warped: &LabelMask,
    label: u16,
) -> Result<std::result::Result<ProbMask, String>> {
    let prompt = match cfg.prompt.kind().map(|k| make_prompt(warped, k, label)).transpose() {
        Ok(p) => p,
        Err(e @ atlasfuse_core::Error::EmptyPrior(_)) => return Ok(Err(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let wants_reference = cfg.backend.as_ref().is_some_and(|b| b.wants_reference());
    let reference = if wants_reference { inputs.gt.as_ref().map(|g| g.select(label)) } else { None };
    let req = SegmentRequest { query: &inputs.query, prompt: prompt.as_ref(), reference: reference.as_ref() };
    match backend.segment(&req) {
        Ok(m) => Ok(Ok(m)),
        Err(e @ atlasfuse_core::Error::EmptyPrior(_)) => Ok(Err(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

/// Gates for `labels`, fitted jointly so pseudo-query registrations are
/// shared between contexts.
fn gates_for(
    backend: &dyn Backend,
    cfg: &PipelineConfig,
    inputs: &CaseInputs,
    labels: &[u16],
    loaded: Option<FusionParams>,
) -> Result<Vec<(FusionParams, Option<FitOutcome>)>> {
    Ok(match cfg.fusion.source {
        FusionSource::Fixed => vec![(cfg.fusion.params.expect("validated"), None); labels.len()],
        FusionSource::Load => vec![(loaded.expect("loaded before fusion"), None); labels.len()],
        FusionSource::Fit if labels.is_empty() => vec![],
        FusionSource::Fit => {
            let mut fit = cfg.fusion.fit;
            fit.prompt = cfg.prompt.kind();
            fit.mask_interp = cfg.mask_interp;
            fit.aug.seed = fit_seed(cfg);
            fusion::fit_fusion_multi(&inputs.atlas_image, &inputs.atlas_mask, labels, backend, &cfg.registration, &fit)?
                .into_iter()
                .map(|o| (o.params, Some(o)))
                .collect()
        }
    })
}

pub fn read_params(path: &Path) -> Result<FusionParams> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let p: FusionParams = serde_json::from_str(&text).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
    p.validate()?;
    Ok(p)
}

/// Register, prompt, segment, fuse and score one atlas/query pair.
pub fn run_pipeline(inputs: &CaseInputs, cfg: &PipelineConfig) -> Result<CaseResult> {
    cfg.validate()?;
    let labels = if cfg.contexts.is_empty() { inputs.atlas_mask.label_set() } else { cfg.contexts.clone() };
    if labels.is_empty() {
        return Err(atlasfuse_core::Error::EmptyPrior("atlas mask has no labels").into());
    }
    let backend = cfg.backend.as_ref().map(|b| b.build()).transpose()?;
    let loaded = match (cfg.fusion.source, &cfg.fusion.params_path) {
        (FusionSource::Load, Some(p)) => Some(read_params(p)?),
        _ => None,
    };
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let reg = register_pipeline(&inputs.atlas_image, &inputs.atlas_mask, &inputs.query, &cfg.registration, cfg.mask_interp)?;
    timings.registration_s = t.elapsed().as_secs_f64();
    let warped = reg.warped_mask.as_ref().expect("pipeline warps the mask");

    let t = Instant::now();
    let fm: Vec<Option<std::result::Result<ProbMask, String>>> = labels
        .iter()
        .map(|&label| backend.as_ref().map(|b| backend_prediction(b.as_ref(), cfg, inputs, warped, label)).transpose())
        .collect::<Result<_>>()?;
    timings.fm_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let fused_labels: Vec<u16> = labels.iter().zip(&fm).filter(|(_, f)| matches!(f, Some(Ok(_)))).map(|(&l, _)| l).collect();
    let mut gates = match &backend {
        Some(b) => gates_for(b.as_ref(), cfg, inputs, &fused_labels, loaded)?.into_iter(),
        None => Vec::new().into_iter(),
    };
    let (mut atlas_parts, mut fm_parts, mut final_parts, mut fusion_log) = (vec![], vec![], vec![], vec![]);
    for (&label, fm) in labels.iter().zip(&fm) {
        let m_atlas = warped.select(label).to_prob();
        let (final_mask, record) = match fm {
            Some(Ok(m_fm)) => {
                let (params, fit) = gates.next().expect("one gate per fused context");
                let fused = fusion::fuse_with(&m_atlas, m_fm, &params, cfg.fusion.fit.gate)?;
                (fusion::binarize(&fused, cfg.threshold), ContextFusion { label, params, fit, fallback: None })
            }
            other => {
                let fallback = match other {
                    Some(Err(reason)) => Some(reason.clone()),
                    _ => None,
                };
                let params = FusionParams::atlas_only();
                (fusion::binarize(&m_atlas, cfg.threshold), ContextFusion { label, params, fit: None, fallback })
            }
        };
        atlas_parts.push((label, fusion::binarize(&m_atlas, cfg.threshold)));
        if let Some(f) = fm {
            let m = match f {
                Ok(m) => fusion::binarize(m, cfg.threshold),
                Err(_) => LabelMask::empty(*inputs.query.geometry())?,
            };
            fm_parts.push((label, m));
        }
        final_parts.push((label, final_mask));
        fusion_log.push(record);
    }
    timings.fusion_s = t.elapsed().as_secs_f64();

    let reports = match &inputs.gt {
        Some(gt) => {
            gt.geometry().check_same(inputs.query.geometry(), "query ground truth")?;
            let score = |parts: &[(u16, LabelMask)]| -> Result<MetricsReport> {
                let ctx = parts
                    .iter()
                    .map(|(l, m)| ContextMetrics::evaluate(*l, m, &gt.select(*l), &cfg.metrics))
                    .collect::<atlasfuse_core::Result<Vec<_>>>()?;
                Ok(MetricsReport::from_contexts(ctx, &cfg.metrics))
            };
            Some(StageReports {
                atlas: score(&atlas_parts)?,
                fm: if fm_parts.is_empty() { None } else { Some(score(&fm_parts)?) },
                final_: score(&final_parts)?,
            })
        }
        None => None,
    };

    Ok(CaseResult {
        m_atlas: combine_by_priority(&atlas_parts)?,
        m_fm: if fm_parts.is_empty() { None } else { Some(combine_by_priority(&fm_parts)?) },
        m_final: combine_by_priority(&final_parts)?,
        labels,
        reports,
        fusion: fusion_log,
        registration: RegistrationSummary::new(&reg),
        loss_trace: reg.loss_trace.rows().collect(),
        timings,
    })
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub(crate) fn write_text(text: &str, path: &Path) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

/// Writes everything except timings, which vary between runs.
pub fn write_case_outputs(r: &CaseResult, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let ext = &cfg.output_format;
    io::write_mask(&r.m_atlas, &dir.join(format!("m_atlas.{ext}")))?;
    if let Some(m) = &r.m_fm {
        io::write_mask(m, &dir.join(format!("m_fm.{ext}")))?;
    }
    io::write_mask(&r.m_final, &dir.join(format!("m_final.{ext}")))?;
    if let Some(rep) = &r.reports {
        write_json(rep, &dir.join("metrics.json"))?;
    }
    write_json(&r.fusion, &dir.join("fusion.json"))?;
    write_json(&r.registration, &dir.join("registration.json"))?;
    let mut trace = String::from("stage,iteration,loss\n");
    for (stage, i, l) in &r.loss_trace {
        trace.push_str(&format!("{stage},{i},{l}\n"));
    }
    write_text(&trace, &dir.join("loss_trace.csv"))
}

/// Loads, runs and writes one case configured by a file.
pub fn run_case(cfg: &CaseConfig, out_dir: &Path) -> Result<CaseResult> {
    let inputs = CaseInputs::load(cfg)?;
    let result = run_pipeline(&inputs, &cfg.pipeline)?;
    write_case_outputs(&result, &cfg.pipeline, out_dir)?;
    write_text(&to_toml(cfg), &out_dir.join("config.resolved.toml"))?;
    Ok(result)
}

/// Pool for case-level parallelism, sized by `ATLASFUSE_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("ATLASFUSE_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("ATLASFUSE_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("ATLASFUSE_THREADS must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}
