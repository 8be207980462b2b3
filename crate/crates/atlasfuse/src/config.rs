//! TOML run configuration. Paths are relative to the file they appear in;
//! every run writes the resolved form back next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use atlasfuse_core::fusion::{FitConfig, FusionParams};
use atlasfuse_core::metrics::MetricOptions;
use atlasfuse_core::prompting::PromptKind;
use atlasfuse_core::registration::RegConfig;
use atlasfuse_core::xform::MaskInterp;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::external::BackendSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptChoice {
    Click,
    Box,
    #[default]
    Mask,
    SliceBox,
    /// Non-promptable backend.
    None,
}

impl PromptChoice {
    pub fn kind(self) -> Option<PromptKind> {
        match self {
            PromptChoice::Click => Some(PromptKind::Click),
            PromptChoice::Box => Some(PromptKind::Box),
            PromptChoice::Mask => Some(PromptKind::Mask),
            PromptChoice::SliceBox => Some(PromptKind::SliceBox),
            PromptChoice::None => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionSource {
    /// Fit on pseudo-queries of the atlas, then safeguard.
    #[default]
    Fit,
    /// Read `params_path` (JSON `{w, b}`).
    Load,
    /// Use `params` as given.
    Fixed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub source: FusionSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<FusionParams>,
    /// `prompt` and `context_label` here are set per context by the harness.
    pub fit: FitConfig,
}

/// Everything except the inputs: shared by `run`, `crossval` and ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Context labels in priority order; empty means every atlas label.
    pub contexts: Vec<u16>,
    pub prompt: PromptChoice,
    pub threshold: f32,
    pub mask_interp: MaskInterp,
    /// Extension of written masks: `nii.gz`, `nii` or `mvol.json`.
    pub output_format: String,
    pub registration: RegConfig,
    /// No backend: every context is atlas-only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendSpec>,
    pub fusion: FusionConfig,
    pub metrics: MetricOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            contexts: Vec::new(),
            prompt: PromptChoice::Mask,
            threshold: 0.5,
            mask_interp: MaskInterp::Nearest,
            output_format: "nii.gz".into(),
            registration: RegConfig::default(),
            backend: Some(BackendSpec::RegionGrow(Default::default())),
            fusion: FusionConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        self.fusion.fit.validate()?;
        if let Some(b) = &self.backend {
            b.validate()?;
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !["nii.gz", "nii", "mvol.json"].contains(&self.output_format.as_str()) {
            return Err(Error::Config(format!("unknown output_format {:?}", self.output_format)));
        }
        if self.contexts.contains(&0) {
            return Err(Error::Config("label 0 is background and cannot be a context".into()));
        }
        match self.fusion.source {
            FusionSource::Load if self.fusion.params_path.is_none() => Err(Error::Config("fusion source load needs params_path".into())),
            FusionSource::Fixed => self.fusion.params.ok_or_else(|| Error::Config("fusion source fixed needs params".into()))?.validate().map_err(Into::into),
            _ => Ok(()),
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(b) = &mut self.backend {
            b.resolve_paths(base);
        }
        if let Some(p) = &mut self.fusion.params_path {
            *p = base.join(&*p);
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(Error::io(path))?, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasPaths {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryPaths {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
}

/// One atlas/query case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub atlas: AtlasPaths,
    pub query: QueryPaths,
    /// Not written back, so the resolved config does not depend on where a
    /// run was directed.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl CaseConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg: CaseConfig = toml::from_str(&text).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.atlas.image = base.join(&cfg.atlas.image);
        cfg.atlas.mask = base.join(&cfg.atlas.mask);
        cfg.query.image = base.join(&cfg.query.image);
        if let Some(gt) = &mut cfg.query.gt {
            *gt = base.join(&*gt);
        }
        if let Some(out) = &mut cfg.output_dir {
            *out = base.join(&*out);
        }
        cfg.pipeline.resolve_paths(base);
        cfg.pipeline.validate()?;
        Ok(cfg)
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("configuration serializes to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&to_toml(&cfg), Path::new("c.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_case_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.toml");
        fs::write(
            &path,
            r#"
seed = 3
contexts = [2, 1]
output_dir = "out"
[atlas]
image = "a.nii.gz"
mask = "am.nii.gz"
[query]
image = "q.nii.gz"
[backend]
kind = "oracle"
corruption = { erode_r = 1.0 }
[fusion]
source = "fixed"
params = { w = [0, 0, 0, 0, 0, 0], b = 40 }
[registration]
deform_iters = 10
"#,
        )
        .unwrap();
        let cfg = CaseConfig::load(&path).unwrap();
        assert_eq!(cfg.atlas.image, dir.path().join("a.nii.gz"));
        assert_eq!(cfg.output_dir, Some(dir.path().join("out")));
        assert_eq!(cfg.pipeline.contexts, vec![2, 1]);
        assert_eq!(cfg.pipeline.registration.deform_iters, 10);
        assert_eq!(cfg.pipeline.fusion.params, Some(FusionParams::atlas_only()));
        let written = to_toml(&cfg);
        assert!(!written.contains("output_dir"));
        let reparsed: CaseConfig = toml::from_str(&written).unwrap();
        assert_eq!(reparsed.pipeline, cfg.pipeline);
    }

    #[test]
    fn inconsistent_fusion_source_is_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.fusion.source = FusionSource::Load;
        assert!(cfg.validate().is_err());
        cfg.fusion.source = FusionSource::Fixed;
        assert!(cfg.validate().is_err());
        cfg.fusion.params = Some(FusionParams { w: [f64::NAN; 6], b: 0.0 });
        assert!(cfg.validate().is_err());
        cfg.fusion.params = Some(FusionParams::fm_only());
        cfg.validate().unwrap();
    }
}
