//! Backend selection and the file-based protocol for external models.
//!
//! Each call gets a fresh request directory holding `request.json`, the query
//! as MVOL and the prompt mask if there is one. The command runs with that
//! directory as its last argument and must leave `mask.mvol.json` behind.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use atlasfuse_core::backend::{Backend, Corruption, Oracle, RegionGrow, SegmentRequest};
use atlasfuse_core::prompting::PromptShape;
use atlasfuse_core::{LabelMask, ProbMask};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::prompt_file::PromptDoc;

pub const REQUEST_FILE: &str = "request.json";
pub const QUERY_FILE: &str = "query.mvol.json";
pub const PROMPT_MASK_FILE: &str = "prompt.mvol.json";
pub const OUTPUT_FILE: &str = "mask.mvol.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub version: u32,
    pub volume: String,
    pub prompt: Option<PromptDoc>,
    pub expected_output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    /// Without a path the oracle scores against the reference the harness
    /// passes along (the query ground truth or a pseudo-query label).
    #[serde(default)]
    pub gt_mask_path: Option<PathBuf>,
    #[serde(default)]
    pub corruption: Corruption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    /// Program and leading arguments.
    pub command: Vec<String>,
    /// Parent of the request directories; the system temp dir by default.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    600.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    Oracle(OracleSpec),
    RegionGrow(RegionGrow),
    External(ExternalSpec),
}

impl BackendSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackendSpec::Oracle(o) => o.corruption.validate()?,
            BackendSpec::RegionGrow(r) if !(r.k_sigma > 0.0 && r.k_sigma.is_finite()) => {
                return Err(Error::Config("k_sigma must be positive".into()));
            }
            BackendSpec::External(e) if e.command.is_empty() => return Err(Error::Config("external command is empty".into())),
            BackendSpec::External(e) if !(e.timeout_s > 0.0 && e.timeout_s.is_finite()) => {
                return Err(Error::Config("timeout_s must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Makes relative paths relative to `base` instead of the working dir.
    pub fn resolve_paths(&mut self, base: &Path) {
        match self {
            BackendSpec::Oracle(OracleSpec { gt_mask_path: Some(p), .. }) => *p = base.join(&*p),
            BackendSpec::External(ExternalSpec { workdir: Some(w), .. }) => *w = base.join(&*w),
            _ => {}
        }
    }

    /// True when the backend reads the per-query reference of a request.
    pub fn wants_reference(&self) -> bool {
        matches!(self, BackendSpec::Oracle(OracleSpec { gt_mask_path: None, .. }))
    }

    pub fn build(&self) -> Result<Box<dyn Backend + Send + Sync>> {
        self.validate()?;
        Ok(match self {
            BackendSpec::Oracle(o) => {
                let gt = o.gt_mask_path.as_deref().map(io::read_mask).transpose()?;
                Box::new(Oracle { gt, corruption: o.corruption })
            }
            BackendSpec::RegionGrow(r) => Box::new(*r),
            BackendSpec::External(e) => Box::new(ExternalBackend {
                command: e.command.clone(),
                workdir: e.workdir.clone().unwrap_or_else(std::env::temp_dir),
                timeout: Duration::from_secs_f64(e.timeout_s),
            }),
        })
    }
}

pub fn read_backend_spec(path: &Path) -> Result<BackendSpec> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut spec: BackendSpec = serde_json::from_str(&text).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
    spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug)]
pub struct ExternalBackend {
    pub command: Vec<String>,
    pub workdir: PathBuf,
    pub timeout: Duration,
}

static NEXT_REQUEST: AtomicU64 = AtomicU64::new(0);

fn tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let start = text.len().saturating_sub(2000);
    let start = (start..text.len()).find(|&i| text.is_char_boundary(i)).unwrap_or(text.len());
    text[start..].trim().to_string()
}

impl ExternalBackend {
    /// Writes the request directory for `req` and returns it.
    pub fn write_request(&self, req: &SegmentRequest<'_>) -> Result<PathBuf> {
        let n = NEXT_REQUEST.fetch_add(1, Ordering::Relaxed);
        let dir = self.workdir.join(format!("atlasfuse-request-{}-{n}", std::process::id()));
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        io::write_volume(req.query, &dir.join(QUERY_FILE))?;
        if let Some(PromptShape::Mask(m)) = req.prompt.map(|p| &p.shape) {
            io::write_mask(m, &dir.join(PROMPT_MASK_FILE))?;
        }
        let request = Request {
            version: 1,
            volume: QUERY_FILE.into(),
            prompt: req.prompt.map(|p| PromptDoc::from_prompt(p, PROMPT_MASK_FILE)),
            expected_output: OUTPUT_FILE.into(),
        };
        write_request_file(&request, &dir.join(REQUEST_FILE))?;
        Ok(dir)
    }

    fn run(&self, req: &SegmentRequest<'_>) -> Result<ProbMask> {
        let dir = self.write_request(req)?;
        let (out_log, err_log) = (dir.join("stdout.log"), dir.join("stderr.log"));
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&dir)
            .stdin(Stdio::null())
            .stdout(File::create(&out_log).map_err(Error::io(&out_log))?)
            .stderr(File::create(&err_log).map_err(Error::io(&err_log))?)
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {:?}: {e}", self.command[0])))?;
        let start = Instant::now();
        let status = loop {
            if let Some(s) = child.try_wait().map_err(|e| Error::Backend(e.to_string()))? {
                break s;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Backend(format!("timed out after {:.1} s (request kept in {})", self.timeout.as_secs_f64(), dir.display())));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        if !status.success() {
            return Err(Error::Backend(format!("{status}; stderr: {} (request kept in {})", tail(&err_log), dir.display())));
        }
        let out = io::read_prob(&dir.join(OUTPUT_FILE))
            .map_err(|e| Error::Backend(format!("malformed response: {e} (request kept in {})", dir.display())))?;
        out.geometry().check_same(req.query.geometry(), "external backend output")?;
        let _ = fs::remove_dir_all(&dir);
        Ok(out)
    }
}

impl Backend for ExternalBackend {
    fn name(&self) -> String {
        format!("external:{}", self.command.join(" "))
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> atlasfuse_core::Result<ProbMask> {
        Ok(self.run(req)?)
    }
}

pub fn write_request_file(r: &Request, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(r).expect("request serializes");
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_request_file(path: &Path) -> Result<Request> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let r: Request = serde_json::from_str(&text).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
    if r.version != 1 {
        return Err(Error::Unsupported(path.into(), format!("request version {}", r.version)));
    }
    Ok(r)
}

/// Reference responder: answers with the prompt itself rasterized on the
/// query grid (empty without a prompt).
pub fn echo_backend(dir: &Path) -> Result<()> {
    let r = read_request_file(&dir.join(REQUEST_FILE))?;
    let query = io::read_volume(&dir.join(&r.volume))?;
    let g = *query.geometry();
    let mask = match r.prompt {
        None => LabelMask::empty(g)?,
        Some(doc) => match doc.to_prompt(dir)?.shape {
            PromptShape::Mask(m) => m,
            PromptShape::Click(v) => LabelMask::from_fn(g, |p| u16::from(p == v))?,
            PromptShape::Box(b) | PromptShape::SliceBox { bbox: b, .. } => LabelMask::from_fn(g, |p| u16::from(b.contains(p)))?,
        },
    };
    io::write_prob(&mask.to_prob(), &dir.join(&r.expected_output))
}
