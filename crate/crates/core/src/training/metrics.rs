use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One metrics line. Absent fields are omitted from the JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_ccr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_crr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_mlm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    /// Gradient-check rows: check name, worst relative error, verdict.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rel_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
    pub seed: u64,
}

/// JSON-lines sink. The first line holds the resolved run configuration;
/// writes from several threads are serialized.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: &serde_json::Value) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::Path { path: path.to_path_buf(), message: e.to_string() })?;
        let writer = Self { path: path.to_path_buf(), out: Mutex::new(BufWriter::new(file)) };
        writer.write_value(&serde_json::json!({ "config": header }))?;
        Ok(writer)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_value<T: Serialize>(&self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)?;
        let mut out = self.out.lock().expect("metrics lock poisoned");
        writeln!(out, "{line}")?;
        Ok(())
    }

    pub fn write(&self, record: &MetricRecord) -> Result<()> {
        self.write_value(record)
    }

    pub fn flush(&self) -> Result<()> {
        self.out.lock().expect("metrics lock poisoned").flush()?;
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        if let Ok(mut out) = self.out.lock() {
            let _ = out.flush();
        }
    }
}
