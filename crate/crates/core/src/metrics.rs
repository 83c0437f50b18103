//! MAE/RMSE reports with density-band and per-category breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glce::InferenceResult;
use crate::model::{AnnotationSet, BandName, BandingScheme, UncoveredCount};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    abs: f64,
    sq: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, err: f64) {
        self.abs += err.abs();
        self.sq += err * err;
        self.n += 1;
    }

    fn cell(&self) -> Cell {
        if self.n == 0 {
            return Cell::default();
        }
        let n = self.n as f64;
        Cell {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            n: self.n,
        }
    }
}

/// MAE and RMSE of paired predictions and ground truths, summed in input order.
pub fn mae_rmse(pairs: impl IntoIterator<Item = (f64, f64)>) -> Cell {
    let mut acc = Acc::default();
    for (pred, gt) in pairs {
        acc.push(pred - gt);
    }
    acc.cell()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Cell,
    pub per_band: BTreeMap<BandName, Cell>,
    pub per_category: BTreeMap<String, Cell>,
    pub parse_failure_count: u64,
    /// Images with no usable prediction at all.
    pub failed_images: u64,
    /// Whether flagged results were left out of every cell.
    pub excludes_failures: bool,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("MissingGroundTruth: no annotation for image {0:?}")]
    MissingGroundTruth(String),
    #[error("EmptyResults: nothing to evaluate")]
    EmptyResults,
    #[error("ground-truth count {} is not covered by the banding scheme", .0.0)]
    Uncovered(UncoveredCount),
}

/// Scores fused predictions against ground truth. Bands follow the
/// ground-truth count. Results flagged with parse failures are included.
pub fn evaluate(
    results: &[InferenceResult],
    truth: &AnnotationSet,
    scheme: &BandingScheme,
    fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    build(results, truth, scheme, fingerprint, false)
}

/// Same as [`evaluate`] but leaves out every flagged or failed result.
pub fn evaluate_excluding_failures(
    results: &[InferenceResult],
    truth: &AnnotationSet,
    scheme: &BandingScheme,
    fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    build(results, truth, scheme, fingerprint, true)
}

fn build(
    results: &[InferenceResult],
    truth: &AnnotationSet,
    scheme: &BandingScheme,
    fingerprint: &str,
    exclude: bool,
) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut overall = Acc::default();
    let mut bands: BTreeMap<BandName, Acc> = BTreeMap::new();
    let mut cats: BTreeMap<String, Acc> = BTreeMap::new();
    let mut parse_failures = 0u64;
    let mut failed = 0u64;
    for r in results {
        let rec = truth
            .get(&r.image_id)
            .ok_or_else(|| EvalError::MissingGroundTruth(r.image_id.clone()))?;
        parse_failures += u64::from(r.parse_failures);
        failed += u64::from(r.error.is_some());
        if exclude && r.is_failure() {
            continue;
        }
        let band = scheme.band_of(rec.count).map_err(EvalError::Uncovered)?;
        let err = r.fused - rec.count as f64;
        overall.push(err);
        bands.entry(band.name).or_default().push(err);
        cats.entry(rec.category.clone()).or_default().push(err);
    }
    if overall.n == 0 {
        return Err(EvalError::EmptyResults);
    }
    Ok(EvalReport {
        overall: overall.cell(),
        per_band: bands.into_iter().map(|(k, a)| (k, a.cell())).collect(),
        per_category: cats.into_iter().map(|(k, a)| (k, a.cell())).collect(),
        parse_failure_count: parse_failures,
        failed_images: failed,
        excludes_failures: exclude,
        config_fingerprint: fingerprint.to_string(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    #[default]
    Markdown,
    Csv,
    Json,
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            _ => Err(format!("unknown table format {s:?} (expected markdown, csv or json)")),
        }
    }
}

struct Row {
    scope: &'static str,
    name: String,
    cell: Cell,
}

fn rows(report: &EvalReport) -> Vec<Row> {
    let mut out = vec![Row {
        scope: "overall",
        name: "all".into(),
        cell: report.overall,
    }];
    out.extend(report.per_band.iter().map(|(b, c)| Row {
        scope: "band",
        name: b.as_str().into(),
        cell: *c,
    }));
    out.extend(report.per_category.iter().map(|(k, c)| Row {
        scope: "category",
        name: k.clone(),
        cell: *c,
    }));
    out
}

fn two(x: f64) -> String {
    format!("{x:.2}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders overall, band (fixed order) and category (sorted) rows.
pub fn render_table(report: &EvalReport, format: TableFormat) -> String {
    let rows = rows(report);
    match format {
        TableFormat::Csv => {
            let mut out = String::from("scope,name,n,mae,rmse\r\n");
            for r in &rows {
                let _ = write!(
                    out,
                    "{},{},{},{},{}\r\n",
                    r.scope,
                    csv_field(&r.name),
                    r.cell.n,
                    two(r.cell.mae),
                    two(r.cell.rmse)
                );
            }
            out
        }
        TableFormat::Json => {
            let rows: Vec<_> = rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "scope": r.scope,
                        "name": r.name,
                        "n": r.cell.n,
                        "mae": two(r.cell.mae),
                        "rmse": two(r.cell.rmse),
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&serde_json::json!({
                "rows": rows,
                "parse_failure_count": report.parse_failure_count,
                "failed_images": report.failed_images,
                "excludes_failures": report.excludes_failures,
                "config_fingerprint": report.config_fingerprint,
            }))
            .expect("table serializes");
            s.push('\n');
            s
        }
        TableFormat::Markdown => {
            let header = ["scope", "name", "n", "MAE", "RMSE"];
            let body: Vec<[String; 5]> = rows
                .iter()
                .map(|r| {
                    [
                        r.scope.to_string(),
                        r.name.replace('|', "\\|"),
                        r.cell.n.to_string(),
                        two(r.cell.mae),
                        two(r.cell.rmse),
                    ]
                })
                .collect();
            let mut widths = header.map(str::len);
            for row in &body {
                for (w, v) in widths.iter_mut().zip(row) {
                    *w = (*w).max(v.chars().count());
                }
            }
            let line = |cells: [&str; 5]| {
                let mut s = String::from("|");
                for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                    // text columns left, numbers right
                    if i < 2 {
                        let _ = write!(s, " {c:<w$} |");
                    } else {
                        let _ = write!(s, " {c:>w$} |");
                    }
                }
                s.push('\n');
                s
            };
            let mut out = line(header);
            out.push('|');
            for (i, w) in widths.iter().enumerate() {
                let dashes = "-".repeat(*w);
                if i < 2 {
                    let _ = write!(out, " {dashes} |");
                } else {
                    let _ = write!(out, " {}: |", &dashes[1..]);
                }
            }
            out.push('\n');
            for row in &body {
                out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4]]));
            }
            out
        }
    }
}
