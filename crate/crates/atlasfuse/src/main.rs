use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use atlasfuse::config::{to_toml, CaseConfig, FusionSource, PipelineConfig, PromptChoice};
use atlasfuse::external::{echo_backend, read_backend_spec};
use atlasfuse::harness::report::{align, timing_csv, StageTimings};
use atlasfuse::harness::{ablation, crossval, read_params, run_case, thread_pool};
use atlasfuse::{io, prompt_file};
use atlasfuse_core::backend::SegmentRequest;
use atlasfuse_core::fusion::{self, FusionParams, GateMode};
use atlasfuse_core::metrics::{HdMode, MetricOptions, MetricsReport};
use atlasfuse_core::phantom::{complementary_scenario, generate_phantom, phantom_suite, DeformSpec, Phantom, PhantomKind, PhantomSpec, PoseSpec};
use atlasfuse_core::prompting::{make_prompt, PromptKind};
use atlasfuse_core::registration::{register_images, register_pipeline, RegConfig};
use atlasfuse_core::xform::MaskInterp;
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "atlasfuse", version, about = "Atlas-guided customization of 3D segmentation backends")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic atlas/query pairs with known ground truth.
    Phantom(PhantomArgs),
    /// Register a moving image onto a fixed one.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Label map carried along with the moving image.
        #[arg(long)]
        moving_mask: Option<PathBuf>,
        /// TOML with registration settings (a `[registration]` table or bare keys).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "nearest")]
        mask_interp: String,
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long)]
        out_mask: Option<PathBuf>,
        /// JSON with the affine part and final stage losses.
        #[arg(long)]
        out_transform: Option<PathBuf>,
    },
    /// Derive a prompt from a label map.
    Prompt {
        #[arg(long)]
        mask: PathBuf,
        /// click, box, mask or slice-box.
        #[arg(long, default_value = "mask")]
        kind: String,
        #[arg(long, default_value_t = 1)]
        label: u16,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a segmentation backend on a query.
    SegmentFm {
        /// Backend spec JSON.
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Ground truth handed to an oracle backend without a stored mask.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Probability map output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend an atlas prediction with a backend prediction.
    Fuse {
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        fm: PathBuf,
        /// Gate parameters JSON `{w, b}`.
        #[arg(long, conflicts_with = "gain")]
        params: Option<PathBuf>,
        /// Constant gain: 0 keeps the backend output, 1 keeps the atlas.
        #[arg(long, value_parser = ["0", "1"])]
        gain: Option<String>,
        #[arg(long, default_value = "per-voxel")]
        gate: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Binary output.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_prob: Option<PathBuf>,
        #[arg(long)]
        out_gain: Option<PathBuf>,
    },
    /// Fit the fusion gate on pseudo-queries of a support example.
    FitFusion {
        #[arg(long)]
        support_image: PathBuf,
        #[arg(long)]
        support_mask: PathBuf,
        #[arg(long)]
        backend: PathBuf,
        /// Pipeline TOML supplying registration, prompt and fit settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        label: u16,
        /// Gate parameters JSON.
        #[arg(long)]
        out: PathBuf,
        /// Full fit outcome, including the safeguard comparison.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run one case end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prompt: Option<String>,
        /// fit, load or fixed.
        #[arg(long)]
        fusion_source: Option<String>,
        #[arg(long)]
        threshold: Option<f32>,
        /// Stage timings as CSV; kept out of the output directory.
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Seeded k-fold cross-validation over a manifest.
    Crossval {
        /// JSON list of `{id, image, gt, contexts}`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Score a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated labels; every ground-truth label by default.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<u16>,
        #[arg(long, default_value_t = 1.0)]
        tolerance_mm: f64,
        #[arg(long, default_value = "pooled")]
        hd_mode: String,
        #[arg(long)]
        no_cl_dice: bool,
        /// JSON report; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Registration/fusion ablation over the bundled phantom suite.
    Ablation {
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Reference external backend: answers a request directory with its own prompt.
    #[command(hide = true)]
    EchoBackend { dir: PathBuf },
}

#[derive(clap::Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    /// nii.gz, nii or mvol.json.
    #[arg(long, default_value = "nii.gz")]
    format: String,
    /// Phantom spec JSON instead of the flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// The ten bundled pairs, one directory each.
    #[arg(long)]
    suite: bool,
    /// Two-organ queries plus a cross-validation manifest.
    #[arg(long)]
    cohort: Option<usize>,
    /// The two-organ pair whose backend misses the small organ, plus an oracle spec.
    #[arg(long)]
    complementary: bool,
    /// sphere, two-organ or tube-tree.
    #[arg(long, default_value = "two-organ")]
    kind: String,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Sphere radius in voxels; a quarter of the size by default.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    shaded: bool,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    max_disp: f64,
    #[arg(long, default_value_t = 8.0)]
    sigma: f64,
    #[arg(long, value_delimiter = ',')]
    rotate_deg: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    translate_vox: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    scale: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses a kebab-case name with the serde representation of `T`.
fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.into())).with_context(|| format!("unknown {what} {s:?}"))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn triple(what: &str, v: &Option<Vec<f64>>, default: [f64; 3]) -> Result<[f64; 3]> {
    match v.as_deref() {
        None => Ok(default),
        Some(&[a, b, c]) => Ok([a, b, c]),
        Some(other) => bail!("--{what} takes three comma-separated values, got {}", other.len()),
    }
}

fn write_pair(p: &Phantom, dir: &Path, ext: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_volume(&p.atlas_image, &dir.join(format!("atlas_image.{ext}")))?;
    io::write_mask(&p.atlas_mask, &dir.join(format!("atlas_mask.{ext}")))?;
    io::write_volume(&p.query_image, &dir.join(format!("query_image.{ext}")))?;
    io::write_mask(&p.query_mask, &dir.join(format!("query_mask.{ext}")))?;
    Ok(())
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let ext = a.format.as_str();
    io::format_of(Path::new(&format!("x.{ext}")))?;
    fs::create_dir_all(&a.out)?;
    if a.suite {
        for (i, spec) in phantom_suite(a.size).iter().enumerate() {
            let dir = a.out.join(format!("pair{i:02}"));
            write_pair(&generate_phantom(spec)?, &dir, ext)?;
            write_json(spec, &dir.join("spec.json"))?;
        }
    } else if let Some(count) = a.cohort {
        let mut cases = Vec::new();
        let suite = phantom_suite(a.size);
        for i in 0..count {
            let mut spec = PhantomSpec { kind: PhantomKind::TwoOrgan, ..suite[i % suite.len()].clone() };
            spec.deform.seed += 1000 * (i / suite.len()) as u64;
            spec.seed += 1000 * (i / suite.len()) as u64;
            let p = generate_phantom(&spec)?;
            let id = format!("case{i:02}");
            let (image, gt) = (format!("{id}_image.{ext}"), format!("{id}_gt.{ext}"));
            io::write_volume(&p.query_image, &a.out.join(&image))?;
            io::write_mask(&p.query_mask, &a.out.join(&gt))?;
            cases.push(crossval::ManifestCase { id, image: image.into(), gt: gt.into(), contexts: p.query_mask.label_set() });
        }
        write_json(&cases, &a.out.join("manifest.json"))?;
    } else if a.complementary {
        let sc = complementary_scenario(a.size, a.seed)?;
        write_pair(&sc.phantom, &a.out, ext)?;
        let spec = serde_json::json!({ "kind": "oracle", "corruption": sc.corruption });
        write_json(&spec, &a.out.join("backend.json"))?;
    } else {
        let spec = match &a.spec {
            Some(path) => read_json::<PhantomSpec>(path)?,
            None => {
                let kind = match a.kind.as_str() {
                    "sphere" => PhantomKind::Sphere { radius: a.radius.unwrap_or(a.size as f64 / 4.0), shaded: a.shaded },
                    "two-organ" => PhantomKind::TwoOrgan,
                    "tube-tree" => PhantomKind::TubeTree,
                    other => bail!("unknown phantom kind {other:?}"),
                };
                PhantomSpec {
                    kind,
                    dims: [a.size; 3],
                    noise_sigma: a.noise,
                    deform: DeformSpec { max_disp_vox: a.max_disp, smooth_sigma_vox: a.sigma, seed: a.seed },
                    pose: PoseSpec {
                        rotation_deg: triple("rotate-deg", &a.rotate_deg, [0.0; 3])?,
                        translation_vox: triple("translate-vox", &a.translate_vox, [0.0; 3])?,
                        scale: triple("scale", &a.scale, [1.0; 3])?,
                    },
                    seed: a.seed,
                }
            }
        };
        write_pair(&generate_phantom(&spec)?, &a.out, ext)?;
        write_json(&spec, &a.out.join("spec.json"))?;
    }
    Ok(())
}

/// Reads a pipeline TOML, or defaults when no file is given.
fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn reg_config(path: Option<&Path>) -> Result<RegConfig> {
    let Some(path) = path else { return Ok(RegConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text)?;
    let cfg: RegConfig = match table.get("registration") {
        Some(v) => v.clone().try_into()?,
        None => toml::Value::Table(table).try_into()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn report_timings(rows: &[(String, Vec<StageTimings>)], path: Option<&Path>) -> Result<()> {
    let csv = timing_csv(rows);
    println!("{}", align(&csv));
    if let Some(p) = path {
        fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Phantom(a) => phantom(a)?,
        Cmd::Register { fixed, moving, moving_mask, config, mask_interp, out_image, out_mask, out_transform } => {
            let cfg = reg_config(config.as_deref())?;
            let interp: MaskInterp = parse_name("mask interpolation", &mask_interp)?;
            let (f, m) = (io::read_volume(&fixed)?, io::read_volume(&moving)?);
            let r = match &moving_mask {
                Some(mm) => register_pipeline(&m, &io::read_mask(mm)?, &f, &cfg, interp)?,
                None => register_images(&f, &m, &cfg)?,
            };
            io::write_volume(&r.warped_image, &out_image)?;
            match (&out_mask, &r.warped_mask) {
                (Some(p), Some(wm)) => io::write_mask(wm, p)?,
                (Some(_), None) => bail!("--out-mask needs --moving-mask"),
                _ => {}
            }
            if let Some(p) = out_transform {
                let t = &r.loss_trace;
                let last = |v: &Vec<f64>| v.last().copied();
                write_json(
                    &serde_json::json!({
                        "affine": r.affine,
                        "final_losses": { "rigid": last(&t.rigid), "affine": last(&t.affine), "deform": last(&t.deform) },
                        "max_displacement_mm": r.field.as_ref().map(|f| f.max_norm_mm()),
                    }),
                    &p,
                )?;
            }
        }
        Cmd::Prompt { mask, kind, label, out } => {
            let kind: PromptKind = parse_name("prompt kind", &kind)?;
            prompt_file::write_prompt(&make_prompt(&io::read_mask(&mask)?, kind, label)?, &out)?;
        }
        Cmd::SegmentFm { backend, query, prompt, reference, out } => {
            let b = read_backend_spec(&backend)?.build()?;
            let q = io::read_volume(&query)?;
            let p = prompt.as_deref().map(prompt_file::read_prompt).transpose()?;
            let r = reference.as_deref().map(io::read_mask).transpose()?;
            let m = b.segment(&SegmentRequest { query: &q, prompt: p.as_ref(), reference: r.as_ref() })?;
            io::write_prob(&m, &out)?;
        }
        Cmd::Fuse { atlas, fm, params, gain, gate, threshold, out, out_prob, out_gain } => {
            let gate: GateMode = parse_name("gate mode", &gate)?;
            let p = match (params, gain.as_deref()) {
                (Some(path), _) => read_params(&path)?,
                (None, Some("0")) => FusionParams::fm_only(),
                (None, Some(_)) => FusionParams::atlas_only(),
                (None, None) => bail!("give --params or --gain"),
            };
            let (ma, mf) = (io::read_prob(&atlas)?, io::read_prob(&fm)?);
            let k = fusion::kalman_gain(&ma, &mf, &p, gate)?;
            let fused = fusion::fuse(&ma, &mf, &k)?;
            io::write_mask(&fusion::binarize(&fused, threshold), &out)?;
            if let Some(path) = out_prob {
                io::write_prob(&fused, &path)?;
            }
            if let Some(path) = out_gain {
                io::write_prob(&k, &path)?;
            }
        }
        Cmd::FitFusion { support_image, support_mask, backend, config, label, out, report } => {
            let cfg = pipeline_config(config.as_deref())?;
            let b = read_backend_spec(&backend)?.build()?;
            let mut fit = cfg.fusion.fit;
            fit.prompt = cfg.prompt.kind();
            fit.context_label = label;
            fit.mask_interp = cfg.mask_interp;
            let mask = io::read_mask(&support_mask)?.select(label);
            let outcome = fusion::fit_fusion(&io::read_volume(&support_image)?, &mask, b.as_ref(), &cfg.registration, &fit)?;
            write_json(&outcome.params, &out)?;
            if let Some(p) = report {
                write_json(&outcome, &p)?;
            }
            println!("chosen {:?}, support Dice {:.4}", outcome.chosen, outcome.support_dice);
        }
        Cmd::Run { config, out, seed, prompt, fusion_source, threshold, timings } => {
            let mut cfg = CaseConfig::load(&config)?;
            let p = &mut cfg.pipeline;
            if let Some(s) = seed {
                p.seed = s;
            }
            if let Some(k) = prompt {
                p.prompt = parse_name::<PromptChoice>("prompt", &k)?;
            }
            if let Some(s) = fusion_source {
                p.fusion.source = parse_name::<FusionSource>("fusion source", &s)?;
            }
            if let Some(t) = threshold {
                p.threshold = t;
            }
            p.validate()?;
            let out_dir = out.or(cfg.output_dir.clone()).context("no output directory: set output_dir or pass --out")?;
            let r = run_case(&cfg, &out_dir)?;
            if let Some(rep) = &r.reports {
                println!("dice atlas {:.4}, final {:.4}", rep.atlas.dice, rep.final_.dice);
            }
            report_timings(&[("atlasfuse".into(), vec![r.timings])], timings.as_deref())?;
        }
        Cmd::Crossval { manifest, config, out, folds, seed, timings } => {
            let mut cfg = pipeline_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let rep = crossval::run_crossval(&manifest, &cfg, folds, &out, &thread_pool()?)?;
            for t in &rep.tables {
                println!("{}\n{}", t.metric, align(&t.to_csv()));
            }
            let failed: Vec<&str> = rep.cases.iter().filter(|c| c.error.is_some()).map(|c| c.id.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("failed cases: {}", failed.join(", "));
            }
            let t: Vec<StageTimings> = rep.cases.iter().filter_map(|c| c.timings).collect();
            report_timings(&[("atlasfuse".into(), t)], timings.as_deref())?;
        }
        Cmd::Eval { pred, gt, labels, tolerance_mm, hd_mode, no_cl_dice, out } => {
            let opts = MetricOptions { tolerance_mm, hd_mode: parse_name::<HdMode>("hd mode", &hd_mode)?, cl_dice: !no_cl_dice };
            let rep = MetricsReport::evaluate(&io::read_mask(&pred)?, &io::read_mask(&gt)?, &labels, &opts)?;
            match out {
                Some(p) => write_json(&rep, &p)?,
                None => println!("{}", serde_json::to_string_pretty(&rep)?),
            }
        }
        Cmd::Ablation { size, config, out, timings } => {
            let cfg = pipeline_config(config.as_deref())?;
            let rep = ablation::run_ablation(&phantom_suite(size), &cfg, &thread_pool()?)?;
            fs::create_dir_all(&out)?;
            for t in [&rep.dice, &rep.nsd] {
                fs::write(out.join(format!("table_{}.csv", t.metric)), t.to_csv())?;
                println!("{}\n{}", t.metric, align(&t.to_csv()));
            }
            write_json(&[&rep.dice, &rep.nsd], &out.join("summary.json"))?;
            fs::write(out.join("config.resolved.toml"), to_toml(&cfg))?;
            report_timings(&[(ablation::FULL.into(), rep.timings)], timings.as_deref())?;
        }
        Cmd::EchoBackend { dir } => echo_backend(&dir)?,
    }
    Ok(())
}
