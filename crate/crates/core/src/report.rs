//! CSV and JSON serialization of [`RunReport`] rows.
//!
//! Reports are reproducibility artifacts: identical configurations must
//! produce byte-identical files. The one machine-dependent field, measured
//! wall-clock time, is therefore written as zero unless the caller opts in.

use std::path::Path;

use crate::error::Result;
use crate::harness::RunReport;

/// CSV column order; must match the field order of [`RunReport`].
pub const CSV_HEADER: &str = "config,global_peak_bytes,avg_block_peak_bytes,ttft_wall_s,\
ttft_flops,needle_retention,decode_attention_mass_on_needle,policy,budget,block_size,mode";

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn opt_fixed(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn scrub(report: &RunReport, include_wall_clock: bool) -> RunReport {
    let mut r = report.clone();
    if !include_wall_clock {
        r.ttft_wall_s = 0.0;
    }
    r
}

/// Renders rows as CSV with a fixed header and `%.6f` float formatting.
pub fn to_csv(reports: &[RunReport], include_wall_clock: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for report in reports {
        let r = scrub(report, include_wall_clock);
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{},{},{},{},{}\n",
            csv_quote(&r.config),
            r.global_peak_bytes,
            r.avg_block_peak_bytes,
            r.ttft_wall_s,
            r.ttft_flops,
            opt_fixed(r.needle_retention),
            opt_fixed(r.decode_attention_mass_on_needle),
            r.policy,
            r.budget,
            r.block_size,
            r.mode,
        ));
    }
    out
}

/// Renders rows as a JSON array with the same field names as the CSV columns.
pub fn to_json(reports: &[RunReport], include_wall_clock: bool) -> Result<String> {
    let scrubbed: Vec<RunReport> =
        reports.iter().map(|r| scrub(r, include_wall_clock)).collect();
    serde_json::to_string_pretty(&scrubbed)
        .map_err(|e| crate::error::Error::Parse(format!("report serialization: {e}")))
}

/// Writes CSV and/or JSON files for the given rows.
pub fn write_reports(
    reports: &[RunReport],
    csv_path: Option<&Path>,
    json_path: Option<&Path>,
    include_wall_clock: bool,
) -> Result<()> {
    if let Some(path) = csv_path {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, to_csv(reports, include_wall_clock))?;
    }
    if let Some(path) = json_path {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, to_json(reports, include_wall_clock)?)?;
    }
    Ok(())
}
