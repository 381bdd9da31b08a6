//! Report serialization: full JSON (all draws) plus plotting-ready CSVs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{shift_comparison, EvalReport};

/// Write the full report as pretty JSON, including every draw.
pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    report.validate()?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Parse(format!("report serialization: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Read a report written by [`write_report_json`].
pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    report.validate()?;
    Ok(report)
}

/// Write the k-sweep CSV for one instrument pairing: one row per
/// (feature_source, head, k) with mean, sample stdev and the mean ± stdev
/// band. `cross_instrument` selects the shifted rows instead of the
/// same-instrument rows.
pub fn write_fig2_csv(path: &Path, report: &EvalReport, cross_instrument: bool) -> Result<()> {
    report.validate()?;
    let mut rows: Vec<&crate::eval::EvalEntry> = report
        .entries
        .iter()
        .filter(|e| (e.train_instrument != e.test_instrument) == cross_instrument)
        .collect();
    rows.sort_by(|a, b| {
        (&a.feature_source, a.head, a.k).cmp(&(&b.feature_source, b.head, b.k))
    });
    let mut out = String::from("feature_source,head,k,mean,stdev,lo,hi\n");
    for e in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            e.feature_source,
            e.head,
            e.k,
            e.mean,
            e.stdev,
            e.mean - e.stdev,
            e.mean + e.stdev,
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write the cross-instrument comparison table.
pub fn write_table1_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let rows = shift_comparison(report)?;
    let mut out = String::from("feature_source,head,k,same_mean,shifted_mean,drop\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.feature_source, r.head, r.k, r.same_mean, r.shifted_mean, r.drop,
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
