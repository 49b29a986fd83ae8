use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counters of recoverable numeric events within one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomalies {
    /// Cosine or normalization evaluated at a zero vector.
    pub zero_norm: u64,
    /// Parameter updates skipped for lack of a gradient.
    pub skipped_updates: u64,
    /// Pseudo-label refreshes abandoned on a non-finite objective.
    pub gc_aborted: u64,
}

/// One line of `metrics.jsonl`. Disabled branches report `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_few: Option<f64>,
    pub loss_pat: Option<f64>,
    pub loss_rot: Option<f64>,
    pub loss_loc: Option<f64>,
    pub loss_jig: Option<f64>,
    pub loss_clu: Option<f64>,
    pub loss_total: f64,
    pub lambda_rot: f64,
    pub lambda_loc: f64,
    pub lambda_jig: f64,
    pub lambda_clu: f64,
    pub lr: f64,
    pub wall_time: f64,
    pub anomalies: Anomalies,
    /// Pseudo-label counts per cluster after this epoch's refresh.
    pub cluster_sizes: Option<Vec<usize>>,
}

impl MetricsRecord {
    /// The record with wall-clock time zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self { wall_time: 0.0, ..self.clone() }
    }
}

/// Appends records as JSON lines, flushing after each.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::io("metrics.jsonl", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
