//! CSV output.
//!
//! Trace files have one row per step:
//!
//! | column | meaning |
//! |---|---|
//! | `t` | step index |
//! | `u_0 … u_{n_u−1}` | applied input (slack, DER p…, DER q…) |
//! | `y_0 … y_{n_y−1}` | measured voltage magnitudes |
//! | `u_star_0 …` | oracle optimum, `NaN` without oracle |
//! | `tracking_error` | `‖u − u*‖₂` |
//! | `rel_lin_error` | `‖Δy − HΔu‖₂ / ‖Δy‖₂` |
//! | `violations` | outputs outside the voltage band |
//! | `h_error` | `‖H_used − H_true‖_F` |
//! | `cov_trace` | estimator covariance trace |
//! | `excited` | persistency of the recent input increments (0/1) |
//! | `oracle_residual`, `oracle_iters` | oracle certificate |
//!
//! Report files have one row per variant with the fields of
//! [`VariantSummary`]. Floats are written in shortest round-trip form.

use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{OfoError, Result};
use crate::sim::{ComparisonReport, SimulationTrace, StepRecord, VariantSummary};

const TAIL: [&str; 8] = [
    "tracking_error",
    "rel_lin_error",
    "violations",
    "h_error",
    "cov_trace",
    "excited",
    "oracle_residual",
    "oracle_iters",
];

pub fn trace_header(n_u: usize, n_y: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..n_u).map(|i| format!("u_{i}")));
    h.extend((0..n_y).map(|i| format!("y_{i}")));
    h.extend((0..n_u).map(|i| format!("u_star_{i}")));
    h.extend(TAIL.iter().map(|s| s.to_string()));
    h
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| OfoError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_trace_csv(trace: &SimulationTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(trace_header(trace.n_u, trace.n_y))?;
    for s in &trace.steps {
        let mut row = vec![s.t.to_string()];
        row.extend(s.u.iter().map(f64::to_string));
        row.extend(s.y.iter().map(f64::to_string));
        match &s.u_star {
            Some(u) => row.extend(u.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n("NaN".to_string(), trace.n_u)),
        }
        row.push(s.tracking_error.to_string());
        row.push(s.rel_lin_error.to_string());
        row.push(s.violations.to_string());
        row.push(s.h_error.to_string());
        row.push(s.cov_trace.to_string());
        row.push(u8::from(s.excited).to_string());
        row.push(s.oracle_residual.to_string());
        row.push(s.oracle_iters.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| OfoError::io(path, e))
}

fn parse_cell<T: std::str::FromStr>(path: &Path, row: usize, col: &str, cell: &str) -> Result<T> {
    cell.trim().parse().map_err(|_| OfoError::Profile {
        path: path.to_path_buf(),
        message: format!("row {row}, column `{col}`: cannot parse `{cell}`"),
    })
}

/// Read a trace written by [`write_trace_csv`]. Input and output widths are
/// inferred from the header.
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<StepRecord>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => OfoError::io(path, io),
        other => OfoError::Profile {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    })?;
    let header = r.headers()?.clone();
    let count = |prefix: &str| {
        header
            .iter()
            .filter(|h| {
                h.strip_prefix(prefix)
                    .is_some_and(|rest| rest.parse::<usize>().is_ok())
            })
            .count()
    };
    let n_u = count("u_");
    let n_y = count("y_");
    let expected = trace_header(n_u, n_y);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(OfoError::Profile {
            path: path.to_path_buf(),
            message: "header does not match the trace schema".into(),
        });
    }
    let mut steps = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let f = |c: usize| parse_cell::<f64>(path, row, &expected[c], &rec[c]);
        let vec = |from: usize, n: usize| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(
                (from..from + n).map(f).collect::<Result<Vec<_>>>()?,
            ))
        };
        let u = vec(1, n_u)?;
        let y = vec(1 + n_u, n_y)?;
        let u_star = vec(1 + n_u + n_y, n_u)?;
        let tail = 1 + 2 * n_u + n_y;
        let excited: u8 = parse_cell(path, row, "excited", &rec[tail + 5])?;
        steps.push(StepRecord {
            t: parse_cell(path, row, "t", &rec[0])?,
            u,
            y,
            u_star: if u_star.iter().all(|v| v.is_nan()) {
                None
            } else {
                Some(u_star)
            },
            tracking_error: f(tail)?,
            rel_lin_error: f(tail + 1)?,
            violations: parse_cell(path, row, "violations", &rec[tail + 2])?,
            h_error: f(tail + 3)?,
            cov_trace: f(tail + 4)?,
            excited: excited != 0,
            oracle_residual: f(tail + 6)?,
            oracle_iters: parse_cell(path, row, "oracle_iters", &rec[tail + 7])?,
        });
    }
    Ok((n_u, n_y, steps))
}

pub fn write_summaries_csv(summaries: &[VariantSummary], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    if summaries.is_empty() {
        w.write_record([
            "label",
            "variant",
            "alpha",
            "mean_tracking_error",
            "final_third_tracking_error",
            "final_third_rel_error",
            "total_violations",
            "diverged",
            "nonconverged",
        ])?;
    }
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| OfoError::io(path, e))
}

pub fn write_report_csv(report: &ComparisonReport, path: impl AsRef<Path>) -> Result<()> {
    write_summaries_csv(&report.summaries, path)
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    t: usize,
    label: &'a str,
    rows: Vec<Vec<f64>>,
}

/// One JSON file per recorded sensitivity, `<stem>_<t>.json`.
pub fn write_checkpoints(trace: &SimulationTrace, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    for (t, h) in &trace.checkpoints {
        let path = dir.join(format!("{stem}_{t}.json"));
        let doc = Checkpoint {
            t: *t,
            label: &trace.label,
            rows: matrix_rows(h),
        };
        let text = serde_json::to_string_pretty(&doc)?;
        std::fs::write(&path, text).map_err(|e| OfoError::io(&path, e))?;
    }
    Ok(())
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
