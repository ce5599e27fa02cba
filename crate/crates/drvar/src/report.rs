//! Report rendering: aligned text tables, CSV, and JSON with an embedded
//! format version and the fully resolved configuration.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::simlab::{CorrelationRow, McSummary};

pub const FORMAT_VERSION: u32 = 1;

/// Output format for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "table" => Ok(Format::Table),
            other => Err(Error::Config(format!(
                "unknown format '{other}' (expected json, csv, or table)"
            ))),
        }
    }
}

/// Per-method row of an `analyze` report.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisRow {
    pub method: String,
    pub mu_hat: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Full `analyze` report.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub n: usize,
    pub n_treated: usize,
    pub rows: Vec<AnalysisRow>,
    /// Pearson correlation of the influence values with each propensity
    /// score component, at the fitted parameters.
    pub correlations: Vec<CorrelationRow>,
}

/// Wrapper adding version and resolved config to a simulation summary.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub format_version: u32,
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub summary: McSummary,
}

fn render_aligned(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (j, cell) in row.iter().enumerate() {
            widths[j] = widths[j].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let header_cells: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    out.push_str(&fmt_row(&header_cells, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}

/// SER table for stdout and `table` format.
pub fn simulation_table(summary: &McSummary) -> String {
    let rows: Vec<Vec<String>> = summary
        .methods
        .iter()
        .map(|m| {
            vec![
                m.method.name().to_string(),
                format!("{:.4}", m.mean_mu_hat),
                format!("{:.4}", m.mc_sd),
                format!("{:.4}", m.mean_se),
                format!("{:.4}", m.ser),
                format!("{:.4}", m.coverage_95),
            ]
        })
        .collect();
    let mut out = render_aligned(
        &["method", "mean_mu_hat", "mc_sd", "mean_se", "ser", "coverage_95"],
        &rows,
    );
    if !summary.correlations.is_empty() {
        out.push('\n');
        let crows: Vec<Vec<String>> = summary
            .correlations
            .iter()
            .map(|c| vec![c.component.clone(), format!("{:+.4e}", c.mean_corr)])
            .collect();
        out.push_str(&render_aligned(&["ps_component", "mean_corr(U, V)"], &crows));
    }
    out.push_str(&format!(
        "\ntruth used for coverage: {:.4} (closed form); replications used {} / failed {}\n",
        summary.truth_used, summary.replications_used, summary.replications_failed
    ));
    out
}

pub fn simulation_csv(summary: &McSummary) -> String {
    let mut out = String::from("method,mean_mu_hat,mc_sd,mean_se,ser,coverage_95\n");
    for m in &summary.methods {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.method.name(),
            m.mean_mu_hat,
            m.mc_sd,
            m.mean_se,
            m.ser,
            m.coverage_95
        ));
    }
    out
}

pub fn analysis_table(report: &AnalysisReport) -> String {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                format!("{:.4}", r.mu_hat),
                format!("{:.4}", r.se),
                format!("[{:.4}, {:.4}]", r.ci_lower, r.ci_upper),
            ]
        })
        .collect();
    let mut out = render_aligned(&["method", "mu_hat", "se", "95% CI"], &rows);
    out.push('\n');
    let crows: Vec<Vec<String>> = report
        .correlations
        .iter()
        .map(|c| vec![c.component.clone(), format!("{:+.4e}", c.mean_corr)])
        .collect();
    out.push_str(&render_aligned(&["ps_component", "corr(U, V)"], &crows));
    out.push_str(&format!("\nn = {}, treated = {}\n", report.n, report.n_treated));
    out
}

pub fn analysis_csv(report: &AnalysisReport) -> String {
    let mut out = String::from("method,mu_hat,se,ci_lower,ci_upper\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.mu_hat, r.se, r.ci_lower, r.ci_upper
        ));
    }
    out
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))
}
