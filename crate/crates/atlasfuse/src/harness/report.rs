//! Result tables: rows are methods or ablations, columns are contexts plus a
//! mean column, cells are mean ± sample standard deviation over cases.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub registration_s: f64,
    pub fm_s: f64,
    pub fusion_s: f64,
}

impl StageTimings {
    pub fn total_s(&self) -> f64 {
        self.registration_s + self.fm_s + self.fusion_s
    }
}

/// `0.8122` -> `"81.22"`.
pub fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Cell {
    pub fn of(values: &[f64]) -> Option<Cell> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Some(Cell { mean, std: var.sqrt(), n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    /// One per column; `None` where no case defined the value.
    pub cells: Vec<Option<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub metric: String,
    /// Values are fractions rendered as percentages.
    pub percent: bool,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

/// One metric value of one method on one context of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub method: String,
    pub case_id: String,
    pub label: u16,
    pub value: Option<f64>,
}

impl Table {
    /// Rows follow `methods`, columns follow `labels` then `mean`. The mean
    /// column averages each case over its defined contexts first.
    pub fn aggregate(metric: &str, percent: bool, methods: &[String], labels: &[u16], samples: &[Sample]) -> Table {
        let mut columns: Vec<String> = labels.iter().map(|l| format!("label_{l}")).collect();
        columns.push("mean".into());
        let rows = methods
            .iter()
            .map(|m| {
                let mine: Vec<&Sample> = samples.iter().filter(|s| &s.method == m).collect();
                let mut cells: Vec<Option<Cell>> = labels
                    .iter()
                    .map(|&l| Cell::of(&mine.iter().filter(|s| s.label == l).filter_map(|s| s.value).collect::<Vec<_>>()))
                    .collect();
                let mut case_ids: Vec<&str> = mine.iter().map(|s| s.case_id.as_str()).collect();
                case_ids.sort_unstable();
                case_ids.dedup();
                let per_case: Vec<f64> = case_ids
                    .iter()
                    .filter_map(|id| {
                        let v: Vec<f64> = mine.iter().filter(|s| s.case_id == *id).filter_map(|s| s.value).collect();
                        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                    })
                    .collect();
                cells.push(Cell::of(&per_case));
                Row { name: m.clone(), cells }
            })
            .collect();
        Table { metric: metric.into(), percent, columns, rows }
    }

    fn render(&self, v: f64) -> String {
        if self.percent {
            percent(v)
        } else {
            format!("{v:.2}")
        }
    }

    /// Header `method,<columns...>`; cells `mean ± std`, empty if undefined.
    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{}\n", self.columns.join(","));
        for r in &self.rows {
            out.push_str(&r.name);
            for c in &r.cells {
                out.push(',');
                if let Some(c) = c {
                    out.push_str(&format!("{} ± {}", self.render(c.mean), self.render(c.std)));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Per-stage means in minutes per image, one row per method.
pub fn timing_csv(rows: &[(String, Vec<StageTimings>)]) -> String {
    let mut out = String::from("method,registration_min_per_image,fm_min_per_image,fusion_min_per_image,total_min_per_image,images\n");
    for (name, t) in rows {
        let n = t.len().max(1) as f64;
        let mean = |f: fn(&StageTimings) -> f64| t.iter().map(f).sum::<f64>() / n / 60.0;
        out.push_str(&format!(
            "{name},{:.4},{:.4},{:.4},{:.4},{}\n",
            mean(|s| s.registration_s),
            mean(|s| s.fm_s),
            mean(|s| s.fusion_s),
            mean(StageTimings::total_s),
            t.len()
        ));
    }
    out
}

/// Aligned text rendering of a CSV with no quoted fields.
pub fn align(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(i, s)| format!("{s:<w$}", w = widths[i])).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
