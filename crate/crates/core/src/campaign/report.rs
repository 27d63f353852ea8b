use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{
    write_atomic, CampaignError, CampaignMode, RunManifest, MANIFEST_FILE, REPORT_CSV, REPORT_JSON,
    REPORT_MD,
};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    /// Markdown tables, one per mode.
    #[default]
    Table,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "table" | "md" | "markdown" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!(
                "unknown report format '{other}' (table, csv, json)"
            )),
        }
    }
}

const EXPLANATION_COLUMNS: [&str; 9] = [
    "Backend",
    "Model",
    "Task",
    "Variant",
    "LFS",
    "Sem. Sim.",
    "Edit Dist.",
    "n",
    "Failure rate",
];

const CONTRAST_COLUMNS: [&str; 9] = [
    "Backend",
    "Model",
    "Task",
    "Original Test Acc.",
    "C.s. Acc.",
    "Edit Dist.",
    "Sem. Sim.",
    "Cons. %",
    "n",
];

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.2}"))
}

fn explanation_row(r: &MetricsReport) -> Vec<String> {
    vec![
        r.backend_id.clone(),
        r.model_name.clone(),
        r.task_id.clone(),
        r.variant.to_string(),
        num(r.lfs_pct),
        num(r.mean_semantic_sim),
        num(r.mean_edit_dist),
        r.n_evaluated.to_string(),
        num(Some(r.failure_rate_pct)),
    ]
}

fn contrast_row(r: &MetricsReport) -> Vec<String> {
    vec![
        r.backend_id.clone(),
        r.model_name.clone(),
        r.task_id.clone(),
        num(r.original_accuracy_pct),
        num(r.contrast_accuracy_pct),
        num(r.mean_edit_dist),
        num(r.mean_semantic_sim),
        num(r.consistency_pct),
        r.n_evaluated.to_string(),
    ]
}

fn sorted(reports: &[MetricsReport]) -> Vec<&MetricsReport> {
    let mut out: Vec<&MetricsReport> = reports.iter().collect();
    out.sort_by(|a, b| {
        (&a.backend_id, a.variant, &a.task_id, &a.model_name).cmp(&(
            &b.backend_id,
            b.variant,
            &b.task_id,
            &b.model_name,
        ))
    });
    out
}

fn csv_cell(cell: &str) -> String {
    if cell.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

fn md_cell(cell: &str) -> String {
    if cell.is_empty() {
        "-".into()
    } else {
        cell.replace('|', "\\|")
    }
}

fn md_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| md_cell(c)).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
}

fn csv_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "{}", header.join(","));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| csv_cell(c)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
}

/// Render one or more run reports. Rows are ordered by backend then
/// variant; explanation and contrast runs get separate tables.
pub fn render_report(reports: &[MetricsReport], format: ReportFormat) -> String {
    let rows = sorted(reports);
    if format == ReportFormat::Json {
        let mut s = if rows.len() == 1 {
            serde_json::to_string_pretty(rows[0])
        } else {
            serde_json::to_string_pretty(&rows)
        }
        .expect("reports serialize");
        s.push('\n');
        return s;
    }
    let explanation: Vec<Vec<String>> = rows
        .iter()
        .filter(|r| r.variant != CampaignMode::Contrast)
        .map(|r| explanation_row(r))
        .collect();
    let contrast: Vec<Vec<String>> = rows
        .iter()
        .filter(|r| r.variant == CampaignMode::Contrast)
        .map(|r| contrast_row(r))
        .collect();
    let mut out = String::new();
    let table = match format {
        ReportFormat::Csv => csv_table,
        _ => md_table,
    };
    if !explanation.is_empty() {
        table(&mut out, &EXPLANATION_COLUMNS, &explanation);
    }
    if !contrast.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        table(&mut out, &CONTRAST_COLUMNS, &contrast);
    }
    out
}

/// Write report.json, report.md and report.csv for one run and return the
/// JSON text.
pub(crate) fn write_run_reports(
    dir: &Path,
    report: &MetricsReport,
) -> Result<String, CampaignError> {
    let reports = std::slice::from_ref(report);
    let json = render_report(reports, ReportFormat::Json);
    write_atomic(&dir.join(REPORT_JSON), json.as_bytes())?;
    write_atomic(
        &dir.join(REPORT_MD),
        render_report(reports, ReportFormat::Table).as_bytes(),
    )?;
    write_atomic(
        &dir.join(REPORT_CSV),
        render_report(reports, ReportFormat::Csv).as_bytes(),
    )?;
    Ok(json)
}

/// The report of a finished run directory. Unfinalized runs are refused.
pub fn load_run_report(dir: &Path) -> Result<MetricsReport, CampaignError> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    if !manifest.finalized {
        return Err(CampaignError::Unfinalized(PathBuf::from(dir)));
    }
    let path = dir.join(REPORT_JSON);
    let data = std::fs::read_to_string(&path).map_err(|e| CampaignError::io(&path, e))?;
    serde_json::from_str(&data)
        .map_err(|e| CampaignError::Corrupt(format!("{}: {e}", path.display())))
}
