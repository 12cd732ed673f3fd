//! Evaluation reports and training logs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use caltok_core::metrics::EvalReport;
use caltok_core::objective::TrainLogRow;

use crate::error::Result;
use crate::json::write_json;
use crate::netpbm::write_bytes;

/// CSV mirror of a report: one row per image, then a `mean` row whose pixel
/// count is the total.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("index,rmse,delta1,n_pixels\n");
    for e in &report.per_image {
        let _ = writeln!(out, "{},{},{},{}", e.index, e.rmse, e.delta1, e.n_pixels);
    }
    let _ = writeln!(out, "mean,{},{},{}", report.rmse, report.delta1, report.n_pixels);
    out
}

pub fn csv_sibling(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes `path` as JSON and its `.csv` sibling.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(path, report)?;
    write_bytes(&csv_sibling(path), report_csv(report).as_bytes())
}

pub fn loss_log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("step,loss,rmse_eval\n");
    for r in rows {
        let eval = r.rmse_eval.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.step, r.loss, eval);
    }
    out
}

pub fn write_loss_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    write_bytes(path, loss_log_csv(rows).as_bytes())
}
