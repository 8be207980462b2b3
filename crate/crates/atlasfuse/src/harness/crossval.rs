//! Seeded k-fold cross-validation over a dataset manifest. Each fold takes
//! its atlas from the next fold, so no case is ever its own support.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{Sample, StageTimings, Table};
use super::{run_pipeline, write_case_outputs, write_json, write_text, CaseInputs, ContextFusion, StageReports};
use crate::config::{to_toml, PipelineConfig};
use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub id: String,
    pub image: PathBuf,
    pub gt: PathBuf,
    /// Context labels present in this case, in priority order.
    pub contexts: Vec<u16>,
}

/// Reads and checks a manifest; paths become relative to its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestCase>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut cases: Vec<ManifestCase> = serde_json::from_str(&text).map_err(|e| Error::Manifest(path.into(), e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |msg: String| Err(Error::Manifest(path.into(), msg));
    let mut seen = BTreeSet::new();
    for c in &mut cases {
        if c.id.is_empty() || c.id.contains(['/', '\\']) || !seen.insert(c.id.clone()) {
            return bad(format!("case id {:?} is empty, contains a path separator or repeats", c.id));
        }
        if c.contexts.is_empty() || c.contexts.contains(&0) {
            return bad(format!("case {:?} needs non-zero context labels", c.id));
        }
        c.image = base.join(&c.image);
        c.gt = base.join(&c.gt);
        for p in [&c.image, &c.gt] {
            if !p.is_file() {
                return bad(format!("case {:?}: {} does not exist", c.id, p.display()));
            }
            io::format_of(p)?;
        }
    }
    Ok(cases)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    /// Atlas for every query of this fold; drawn from the following fold.
    pub support: String,
    pub queries: Vec<String>,
}

/// Shuffles the ids with `seed` and deals them round-robin into `k` folds.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || ids.len() < k {
        return Err(Error::Config(format!("{} cases cannot form {k} folds (need k >= 2 and at least k cases)", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let members: Vec<Vec<String>> = (0..k).map(|f| order.iter().skip(f).step_by(k).map(|&i| ids[i].clone()).collect()).collect();
    Ok((0..k).map(|f| Fold { index: f, support: members[(f + 1) % k][0].clone(), queries: members[f].clone() }).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub fold: usize,
    pub support: String,
    pub labels: Vec<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reports: Option<StageReports>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub fusion: Vec<ContextFusion>,
    /// Failure of this case; the other cases still run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub timings: Option<StageTimings>,
}

pub struct CrossvalReport {
    pub folds: Vec<Fold>,
    pub cases: Vec<CaseRecord>,
    pub tables: Vec<Table>,
}

pub const METRICS: [(&str, bool); 4] = [("dice", true), ("nsd", true), ("hd95", false), ("cl_dice", true)];

/// One sample per stage, context and record.
pub fn samples(records: &[(String, &StageReports)], metric: &str) -> Vec<Sample> {
    let mut out = Vec::new();
    for (id, rep) in records {
        let stages = [("atlas", Some(&rep.atlas)), ("fm", rep.fm.as_ref()), ("final", Some(&rep.final_))];
        for (stage, r) in stages {
            let Some(r) = r else { continue };
            for c in &r.contexts {
                let value = match metric {
                    "dice" => Some(c.dice),
                    "nsd" => Some(c.nsd),
                    "hd95" => c.hd95,
                    _ => c.cl_dice,
                };
                out.push(Sample { method: stage.into(), case_id: id.clone(), label: c.label, value });
            }
        }
    }
    out
}

pub fn tables_for(records: &[(String, &StageReports)], methods: &[String], labels: &[u16]) -> Vec<Table> {
    METRICS.iter().map(|&(m, pct)| Table::aggregate(m, pct, methods, labels, &samples(records, m))).collect()
}

fn run_one(fold: &Fold, query: &ManifestCase, support: &ManifestCase, cfg: &PipelineConfig, out_dir: &Path) -> Result<CaseRecord> {
    let inputs = CaseInputs {
        atlas_image: io::read_volume(&support.image)?,
        atlas_mask: io::read_mask(&support.gt)?,
        query: io::read_volume(&query.image)?,
        gt: Some(io::read_mask(&query.gt)?),
    };
    let wanted = if cfg.contexts.is_empty() { &query.contexts } else { &cfg.contexts };
    let labels: Vec<u16> = wanted.iter().copied().filter(|l| query.contexts.contains(l) && support.contexts.contains(l)).collect();
    if labels.is_empty() {
        return Err(Error::Config(format!("case {:?} shares no context with support {:?}", query.id, support.id)));
    }
    let cfg = PipelineConfig { contexts: labels.clone(), ..cfg.clone() };
    let r = run_pipeline(&inputs, &cfg)?;
    write_case_outputs(&r, &cfg, &out_dir.join("cases").join(&query.id))?;
    Ok(CaseRecord {
        id: query.id.clone(),
        fold: fold.index,
        support: support.id.clone(),
        labels,
        reports: r.reports,
        fusion: r.fusion,
        error: None,
        timings: Some(r.timings),
    })
}

pub fn run_crossval(manifest: &Path, cfg: &PipelineConfig, k: usize, out_dir: &Path, pool: &rayon::ThreadPool) -> Result<CrossvalReport> {
    cfg.validate()?;
    let cases = load_manifest(manifest)?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let folds = make_folds(&ids, k, cfg.seed)?;
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let by_id = |id: &str| cases.iter().find(|c| c.id == id).expect("fold ids come from the manifest");
    let tasks: Vec<(&Fold, &ManifestCase)> = folds.iter().flat_map(|f| f.queries.iter().map(move |q| (f, q))).map(|(f, q)| (f, by_id(q))).collect();
    let mut records: Vec<CaseRecord> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(fold, query)| {
                let support = by_id(&fold.support);
                run_one(fold, query, support, cfg, out_dir).unwrap_or_else(|e| {
                    log::error!("case {} failed: {e}", query.id);
                    CaseRecord {
                        id: query.id.clone(),
                        fold: fold.index,
                        support: support.id.clone(),
                        labels: vec![],
                        reports: None,
                        fusion: vec![],
                        error: Some(e.to_string()),
                        timings: None,
                    }
                })
            })
            .collect()
    });
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let labels: Vec<u16> = records.iter().flat_map(|r| r.labels.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut methods = vec!["atlas".to_string()];
    if cfg.backend.is_some() {
        methods.push("fm".into());
    }
    methods.push("final".into());
    let scored: Vec<(String, &StageReports)> = records.iter().filter_map(|r| r.reports.as_ref().map(|rep| (r.id.clone(), rep))).collect();
    let tables = tables_for(&scored, &methods, &labels);

    write_json(&folds, &out_dir.join("folds.json"))?;
    write_json(&records, &out_dir.join("cases.json"))?;
    write_json(&tables, &out_dir.join("summary.json"))?;
    for t in &tables {
        write_text(&t.to_csv(), &out_dir.join(format!("table_{}.csv", t.metric)))?;
    }
    write_text(&to_toml(cfg), &out_dir.join("config.resolved.toml"))?;
    Ok(CrossvalReport { folds, cases: records, tables })
}
