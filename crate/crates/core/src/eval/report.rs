use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::container::write_atomic;
use crate::error::{Error, Result};

use super::bench::Measurement;
use super::grid::{CellKey, GridReport, RunRecord, SummaryRow, SweepReport};

fn csv_err(e: csv::Error) -> Error {
    Error::Malformed(format!("csv: {e}"))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Malformed(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
}

#[derive(Serialize)]
struct MeasurementRow<'a> {
    component: &'a str,
    split: &'a str,
    metric: &'a str,
    value: f64,
}

/// `component,split,metric,value` rows of a single run.
pub fn measurements_csv(ms: &[Measurement]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in ms {
        w.serialize(MeasurementRow {
            component: &m.component,
            split: &m.split,
            metric: &m.metric,
            value: m.value,
        })
        .map_err(csv_err)?;
    }
    finish(w)
}

fn cell_fields(c: &CellKey) -> Vec<String> {
    vec![
        c.variant.name().to_string(),
        c.lambda_freq.to_string(),
        c.lambda_orth.to_string(),
        c.deep_prompting.to_string(),
        c.pool_size.to_string(),
        c.k.to_string(),
    ]
}

const CELL_HEADER: [&str; 6] = ["variant", "lambda_freq", "lambda_orth", "deep_prompting", "pool_size", "k"];

/// One row per run and metric.
pub fn records_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = CELL_HEADER.iter().chain(&["seed", "component", "split", "metric", "value"]);
    w.write_record(header).map_err(csv_err)?;
    for r in records {
        for m in &r.measurements {
            let mut row = cell_fields(&r.cell);
            row.extend([
                r.seed.to_string(),
                m.component.clone(),
                m.split.clone(),
                m.metric.clone(),
                m.value.to_string(),
            ]);
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    finish(w)
}

/// One row per cell and metric, with the seed median, IQR, seed count and
/// the per-seed values joined by `;`.
pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = CELL_HEADER
        .iter()
        .chain(&["component", "split", "metric", "seeds", "median", "iqr", "vs_full", "values"]);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        let values = r.values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
        let mut row = cell_fields(&r.cell);
        row.extend([
            r.component.clone(),
            r.split.clone(),
            r.metric.clone(),
            r.seeds.to_string(),
            r.median.to_string(),
            r.iqr.to_string(),
            r.vs_full.clone().unwrap_or_default(),
            values,
        ]);
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

/// Whitespace-separated `value median` columns for plotting.
pub fn series_dat(axis: &str, metric: &str, series: &[(f64, f64)]) -> String {
    let mut s = format!("# {axis} {metric}\n");
    for (x, y) in series {
        let _ = writeln!(s, "{x} {y}");
    }
    s
}

/// Writes `records.csv`, `summary.csv` and `report.json` into `dir`.
pub fn write_grid_report(dir: &Path, report: &GridReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("records.csv"), records_csv(&report.records)?.as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary_csv(&report.summary)?.as_bytes())?;
    write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// Metrics plotted by `write_sweep_report`, as (component, split, metric).
pub const SWEEP_SERIES: [(&str, &str, &str); 4] = [
    ("verb", "hm:within-cross", "average_accuracy"),
    ("noun", "hm:within-cross", "average_accuracy"),
    ("verb", "hm:base-novel", "average_accuracy"),
    ("noun", "hm:base-novel", "average_accuracy"),
];

/// Writes `records.csv`, `sweep.json` and one `.dat` file per series in
/// [`SWEEP_SERIES`].
pub fn write_sweep_report(dir: &Path, report: &SweepReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<RunRecord> = report.points.iter().map(|(_, r)| r.clone()).collect();
    write_atomic(&dir.join("records.csv"), records_csv(&records)?.as_bytes())?;
    write_atomic(&dir.join("sweep.json"), &serde_json::to_vec_pretty(report)?)?;
    for (c, split, metric) in SWEEP_SERIES {
        let series = report.series(c, split, metric);
        let name = format!("{}_{}_{}.dat", report.axis.name(), c, split.trim_start_matches("hm:"));
        let label = format!("{c}/{split}/{metric}");
        write_atomic(&dir.join(name), series_dat(report.axis.name(), &label, &series).as_bytes())?;
    }
    Ok(())
}
