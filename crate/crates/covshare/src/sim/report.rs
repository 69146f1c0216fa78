//! Experiment reports: per-cell replication values with summary statistics,
//! written as plot-ready CSV plus a JSON summary.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};

/// One experiment cell: identity columns, one value per replication
/// (ordered by replication index), and summary statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    /// Identity columns, e.g. `[("data_model", "s_eq_r"), ...]`.
    pub fields: Vec<(String, String)>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// 2.5% and 97.5% replication quantiles.
    pub q025: f64,
    pub q975: f64,
    /// Binomial standard error, present for proportion-valued cells.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    /// Reference value for the cell (e.g. an asymptotic benchmark).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub flags: Vec<String>,
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl ReportCell {
    pub fn new(fields: Vec<(String, String)>, values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let q025 = quantile(&values, 0.025);
        let q975 = quantile(&values, 0.975);
        ReportCell { fields, values, mean, q025, q975, se: None, benchmark: None, flags: vec![] }
    }

    /// Attach the binomial standard error for a 0/1-valued cell.
    pub fn with_binomial_se(mut self) -> Self {
        let n = self.values.len() as f64;
        self.se = Some((self.mean * (1.0 - self.mean) / n).sqrt());
        self
    }

    pub fn with_benchmark(mut self, benchmark: f64) -> Self {
        self.benchmark = Some(benchmark);
        self
    }

    pub fn with_flag(mut self, flag: impl Into<String>) -> Self {
        self.flags.push(flag.into());
        self
    }

    pub fn field(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// A full experiment result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub replications: usize,
    pub seed: u64,
    pub cells: Vec<ReportCell>,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn cell(&self, matches: &[(&str, &str)]) -> Option<&ReportCell> {
        self.cells.iter().find(|c| {
            matches.iter().all(|(k, v)| c.field(k) == Some(*v))
        })
    }

    /// One CSV row per cell per replication. Columns are the cells' identity
    /// fields followed by `replication`, `value`, and `benchmark` when any
    /// cell carries one.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::InvalidInput("report has no cells".into()));
        }
        let keys: Vec<&str> = self.cells[0].fields.iter().map(|(k, _)| k.as_str()).collect();
        let any_benchmark = self.cells.iter().any(|c| c.benchmark.is_some());
        let mut header = keys.join(",");
        header.push_str(",replication,value");
        if any_benchmark {
            header.push_str(",benchmark");
        }
        writeln!(w, "{header}").map_err(Error::from)?;
        for cell in &self.cells {
            for (rep, value) in cell.values.iter().enumerate() {
                let mut row = cell
                    .fields
                    .iter()
                    .map(|(_, v)| v.clone())
                    .collect::<Vec<_>>()
                    .join(",");
                row.push_str(&format!(",{rep},{value}"));
                if any_benchmark {
                    match cell.benchmark {
                        Some(b) => row.push_str(&format!(",{b}")),
                        None => row.push(','),
                    }
                }
                writeln!(w, "{row}").map_err(Error::from)?;
            }
        }
        Ok(())
    }

    /// JSON summary of the whole report.
    pub fn write_json<W: Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, self)
            .map_err(|e| Error::InvalidInput(format!("serialization failed: {e}")))?;
        writeln!(w).map_err(Error::from)
    }
}
