//! CSV ingestion of observed samples and CSV/JSON report emission.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{PrteError, Result};
use crate::estimator::EstimateResult;
use crate::montecarlo::McReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy)]
pub enum Report<'a> {
    Estimate(&'a EstimateResult),
    MonteCarlo(&'a McReport),
}

fn io_err(path: &Path, source: std::io::Error) -> PrteError {
    PrteError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ingest_err(path: &Path, line: usize, message: impl Into<String>) -> PrteError {
    PrteError::Ingest {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Positions of `prefix1, prefix2, ...` in the header, in numeric order.
fn numbered_columns(path: &Path, header: &csv::StringRecord, prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(pos, name)| {
            let rest = name.trim().strip_prefix(prefix)?;
            rest.parse::<usize>().ok().map(|k| (k, pos))
        })
        .collect();
    found.sort_unstable();
    for (expect, (k, _)) in (1..).zip(&found) {
        if *k != expect {
            return Err(ingest_err(path, 1, format!("column {prefix}{expect} is missing")));
        }
    }
    Ok(found.into_iter().map(|(_, pos)| pos).collect())
}

/// Reads a sample with header `y, s, x1..xK, z1..zM` (any column order).
/// Features are the identity map of the covariates.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| ingest_err(path, 1, format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingest_err(path, 1, format!("missing column {name}")))
    };
    let yc = col("y")?;
    let sc = col("s")?;
    let xc = numbered_columns(path, &header, "x")?;
    let zc = numbered_columns(path, &header, "z")?;
    if xc.is_empty() {
        return Err(ingest_err(path, 1, "need at least one covariate column x1"));
    }
    if zc.is_empty() {
        return Err(ingest_err(path, 1, "need at least one instrument column z1"));
    }

    let (mut y, mut s, mut x, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, record) in reader.records().enumerate() {
        let fallback = k + 2;
        let record = record.map_err(|e| {
            let line = e.position().map_or(fallback, |p| p.line() as usize);
            ingest_err(path, line, format!("malformed row: {e}"))
        })?;
        let line = record.position().map_or(fallback, |p| p.line() as usize);
        let num = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| ingest_err(path, line, format!("column {} is not numeric: {raw:?}", &header[c])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ingest_err(path, line, format!("column {} is not finite", &header[c])))
            }
        };
        let sv = num(sc)?;
        if sv != 0.0 && sv != 1.0 {
            return Err(ingest_err(path, line, format!("treatment s must be 0 or 1, got {sv}")));
        }
        y.push(num(yc)?);
        s.push(sv);
        x.push(xc.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
        z.push(zc.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
    }
    Dataset::new(y, s, x, z)
}

/// Writes a sample in the layout read by [`ingest_csv`].
pub fn write_dataset_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e.into()))?;
    let mut header = vec!["y".to_string(), "s".to_string()];
    header.extend((1..=data.covariate_dim()).map(|k| format!("x{k}")));
    header.extend((1..=data.instrument_dim()).map(|k| format!("z{k}")));
    w.write_record(&header).map_err(|e| io_err(path, e.into()))?;
    for i in 0..data.len() {
        let mut row = vec![data.y()[i].to_string(), data.s()[i].to_string()];
        row.extend(data.x()[i].iter().map(f64::to_string));
        row.extend(data.z()[i].iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| io_err(path, e.into()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct SummaryRow {
    n: usize,
    #[serde(rename = "L")]
    folds: usize,
    #[serde(rename = "true")]
    truth: f64,
    mean: f64,
    bias: f64,
    rmse: f64,
    coverage: f64,
}

#[derive(Serialize)]
struct EstimateRow {
    prte_hat: f64,
    se: f64,
    ci_lo: f64,
    ci_hi: f64,
    theta3: f64,
    n: usize,
    #[serde(rename = "L")]
    folds: usize,
}

/// Renders a report as a string.
pub fn render_report(report: Report<'_>, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => {
            let s = match report {
                Report::Estimate(r) => serde_json::to_string_pretty(r),
                Report::MonteCarlo(r) => serde_json::to_string_pretty(r),
            }
            .map_err(|e| PrteError::Numerical(format!("json encoding failed: {e}")))?;
            Ok(s + "\n")
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let res = match report {
                Report::Estimate(r) => w.serialize(EstimateRow {
                    prte_hat: r.prte_hat,
                    se: r.se,
                    ci_lo: r.ci_lo,
                    ci_hi: r.ci_hi,
                    theta3: r.theta.theta3,
                    n: r.n,
                    folds: r.folds,
                }),
                Report::MonteCarlo(r) => w.serialize(SummaryRow {
                    n: r.n,
                    folds: r.folds,
                    truth: r.true_prte,
                    mean: r.mean,
                    bias: r.bias,
                    rmse: r.rmse,
                    coverage: r.coverage,
                }),
            };
            res.map_err(|e| PrteError::Numerical(format!("csv encoding failed: {e}")))?;
            let bytes = w
                .into_inner()
                .map_err(|e| PrteError::Numerical(format!("csv encoding failed: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

/// Writes a report to `path`.
pub fn emit_report(report: Report<'_>, format: OutputFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(report, format)?;
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}
