//! Registration/fusion ablation over the bundled phantom suite.

use atlasfuse_core::phantom::{generate_phantom, PhantomSpec};
use atlasfuse_core::registration::RegConfig;
use rayon::prelude::*;

use super::crossval::samples;
use super::report::{Sample, StageTimings, Table};
use super::{run_pipeline, CaseInputs, StageReports};
use crate::config::PipelineConfig;
use crate::error::Result;

pub const NONE: &str = "none";
pub const RIGID: &str = "+rigid";
pub const AFFINE: &str = "+affine";
/// Warped atlas of the full run, before fusion.
pub const DEFORM: &str = "+deformable";
pub const FULL: &str = "+deformable+fusion";

pub fn rows() -> Vec<String> {
    [NONE, RIGID, AFFINE, DEFORM, FULL].map(String::from).to_vec()
}

/// The three atlas-only variants plus `base` itself.
pub fn variants(base: &PipelineConfig) -> Vec<(&'static str, PipelineConfig)> {
    let atlas_only = |enable_rigid, enable_affine| PipelineConfig {
        backend: None,
        registration: RegConfig { enable_rigid, enable_affine, enable_deform: false, ..base.registration.clone() },
        ..base.clone()
    };
    let mut full = base.clone();
    full.registration.enable_rigid = true;
    full.registration.enable_affine = true;
    full.registration.enable_deform = true;
    vec![(NONE, atlas_only(false, false)), (RIGID, atlas_only(true, false)), (AFFINE, atlas_only(true, true)), (FULL, full)]
}

pub struct AblationReport {
    pub dice: Table,
    pub nsd: Table,
    /// Timings of the full variant, one per pair.
    pub timings: Vec<StageTimings>,
}

impl AblationReport {
    /// Mean-column Dice of a row.
    pub fn mean_dice(&self, row: &str) -> Option<f64> {
        let r = self.dice.rows.iter().find(|r| r.name == row)?;
        r.cells.last().copied().flatten().map(|c| c.mean)
    }
}

fn relabel(samples: Vec<Sample>, from: &str, to: &str) -> Vec<Sample> {
    samples.into_iter().filter(|s| s.method == from).map(|s| Sample { method: to.into(), ..s }).collect()
}

pub fn run_ablation(suite: &[PhantomSpec], base: &PipelineConfig, pool: &rayon::ThreadPool) -> Result<AblationReport> {
    base.validate()?;
    let vars = variants(base);
    let tasks: Vec<(usize, usize)> = (0..suite.len()).flat_map(|p| (0..vars.len()).map(move |v| (p, v))).collect();
    let results: Vec<Result<(StageReports, StageTimings)>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(p, v)| {
                let ph = generate_phantom(&suite[p])?;
                let inputs = CaseInputs { atlas_image: ph.atlas_image, atlas_mask: ph.atlas_mask, query: ph.query_image, gt: Some(ph.query_mask) };
                let r = run_pipeline(&inputs, &vars[v].1)?;
                Ok((r.reports.expect("phantoms carry ground truth"), r.timings))
            })
            .collect()
    });
    let mut dice = Vec::new();
    let mut nsd = Vec::new();
    let mut timings = Vec::new();
    for (&(p, v), res) in tasks.iter().zip(results) {
        let (rep, t) = res?;
        let rec = [(format!("pair{p:02}"), &rep)];
        let name = vars[v].0;
        for (metric, out) in [("dice", &mut dice), ("nsd", &mut nsd)] {
            let s = samples(&rec, metric);
            out.extend(relabel(s.clone(), "final", name));
            if name == FULL {
                out.extend(relabel(s, "atlas", DEFORM));
            }
        }
        if name == FULL {
            timings.push(t);
        }
    }
    let mut labels: Vec<u16> = dice.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    Ok(AblationReport {
        dice: Table::aggregate("dice", true, &rows(), &labels, &dice),
        nsd: Table::aggregate("nsd", true, &rows(), &labels, &nsd),
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_toggle_stages_and_backend() {
        let base = PipelineConfig::default();
        let v = variants(&base);
        let flags: Vec<_> = v.iter().map(|(_, c)| (c.registration.enable_rigid, c.registration.enable_affine, c.registration.enable_deform, c.backend.is_some())).collect();
        assert_eq!(flags, [(false, false, false, false), (true, false, false, false), (true, true, false, false), (true, true, true, true)]);
    }
}
