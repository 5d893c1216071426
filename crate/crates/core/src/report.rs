//! Report emission: key-sorted JSON and a fixed-schema CSV.

use crate::defense::ExperimentReport;
use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format: {other} (use json or csv)")),
        }
    }
}

pub const CSV_HEADER: &str = "attack,defense,test_acc_trojaned,asr_trojaned,test_acc_defended,asr_defended,params_before,params_after,cr";

/// Serialize with sorted keys so identical reports emit identical bytes.
pub fn to_json(report: &ExperimentReport) -> Result<String> {
    // serde_json's default map is a BTreeMap: round-tripping through Value
    // leaves every object key-sorted.
    let value = serde_json::to_value(report).map_err(|e| Error::Serialize(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&value).map_err(|e| Error::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<ExperimentReport> {
    serde_json::from_str(text).map_err(|e| Error::Serialize(e.to_string()))
}

fn fmt_metric(v: Option<f32>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

fn csv_row(r: &ExperimentReport) -> String {
    let cr = 1.0 - r.params_after as f64 / r.params_before as f64;
    format!(
        "{},{},{:.6},{},{:.6},{},{},{},{:.6}",
        r.attack,
        r.method,
        r.trojaned.test_acc,
        fmt_metric(r.trojaned.asr),
        r.defended.test_acc,
        fmt_metric(r.defended.asr),
        r.params_before,
        r.params_after,
        cr
    )
}

/// One row per (attack, defense) pair.
pub fn to_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => to_json(report)?,
        ReportFormat::Csv => to_csv(std::slice::from_ref(report)),
    };
    std::fs::write(path, text)?;
    Ok(())
}
