//! CSV and JSON emitters. Column order and key names are part of the interface.

use std::io::Write;
use std::path::Path;

use kvmerge::harness::{AlgorithmSummary, SimulationResult};
use serde::{Deserialize, Serialize};

/// One decode step of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub step: usize,
    pub cache_len: usize,
    pub algorithm: String,
    pub l2_error: f64,
    pub cos_error: f64,
    pub merges: usize,
    pub fallbacks: usize,
}

pub const REPORT_HEADER: [&str; 8] = [
    "seed", "step", "cache_len", "algorithm", "l2_error", "cos_error", "merges", "fallbacks",
];

impl ReportRow {
    pub fn from_run(seed: u64, run: &SimulationResult) -> Vec<Self> {
        run.steps
            .iter()
            .map(|s| ReportRow {
                seed,
                step: s.step,
                cache_len: s.cache_len,
                algorithm: run.algorithm.name().to_string(),
                l2_error: s.l2_error,
                cos_error: s.cos_error,
                merges: s.merges,
                fallbacks: s.fallbacks,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algo: String,
    pub mean_error: f64,
    pub p95_error: f64,
    pub final_cache_len: usize,
    pub fallback_rate: f64,
}

impl From<&AlgorithmSummary> for Summary {
    fn from(s: &AlgorithmSummary) -> Self {
        Self {
            algo: s.algorithm.name().to_string(),
            mean_error: s.mean_error,
            p95_error: s.p95_error,
            final_cache_len: s.final_cache_len,
            fallback_rate: s.fallback_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub head: usize,
    pub mode_index: usize,
    pub lambda: f64,
    pub cumulative_energy: f64,
    /// Empty when no hidden states were given.
    pub c_i: Option<f64>,
}

pub const SPECTRUM_HEADER: [&str; 5] = ["head", "mode_index", "lambda", "cumulative_energy", "c_i"];

/// Writes rows with a header even when `rows` is empty.
pub fn write_csv<S: Serialize, W: Write>(out: W, header: &[&str], rows: &[S]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> csv::Result<()> {
    write_csv(std::fs::File::create(path)?, header, rows)
}

pub fn summaries_json(rows: &[Summary]) -> String {
    serde_json::to_string_pretty(rows).expect("plain data serializes")
}
