//! Study reports and their CSV, JSON and SVG renderings.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::svg::{line_chart, Series};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl FromStr for Format {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(HarnessError::invalid(format!("unknown format '{other}'"))),
        }
    }
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Svg => "svg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub version: String,
    /// Unix seconds; left empty by deterministic studies so reruns are byte-identical.
    pub timestamp: Option<u64>,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Metadata {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            timestamp: None,
            seed,
            config,
        }
    }

    pub fn stamped(mut self) -> Self {
        self.timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
        self
    }
}

/// One (method, sample count, N, trial) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub method: String,
    /// Grid value the cell belongs to.
    pub grid: usize,
    /// Samples (or proposals) actually used.
    pub samples: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub trial: usize,
    pub generator: String,
    pub settings: String,
    pub data_seed: u64,
    pub estimator_seed: u64,
    pub mse: Option<f64>,
    pub bias_norm: Option<f64>,
    pub variance_trace: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub peak_alloc_bytes: Option<u64>,
    /// `ok`, `error: …` or `skipped: …`.
    pub status: String,
}

/// Mean and standard error of the MSE across trials of one (method, grid, N) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub grid: usize,
    pub n: usize,
    pub trials: usize,
    pub failures: usize,
    pub mean_mse: Option<f64>,
    pub se_mse: Option<f64>,
    pub median_wall_time_s: Option<f64>,
    pub peak_alloc_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: Metadata,
    pub records: Vec<Record>,
    pub summary: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn aggregate(&self, method: &str, grid: usize, n: usize) -> Option<&Aggregate> {
        self.summary
            .iter()
            .find(|a| a.method == method && a.grid == grid && a.n == n)
    }

    /// Mean MSE for a method at a grid value, if every trial succeeded.
    pub fn mean_mse(&self, method: &str, grid: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|a| a.method == method && a.grid == grid && a.failures == 0)
            .and_then(|a| a.mean_mse)
    }
}

/// Exact decimal form with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn opt_u64(x: Option<u64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Anything that can be written to disk by [`emit_report`].
pub trait Report: Serialize {
    /// File name stem, e.g. `approx_error`.
    fn stem(&self) -> &str;
    fn csv_header(&self) -> Vec<&'static str>;
    fn csv_rows(&self) -> Vec<Vec<String>>;
    fn svg(&self) -> Option<String>;

    fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.csv_header())?;
        for row in self.csv_rows() {
            w.write_record(&row)?;
        }
        w.into_inner()
            .map_err(|e| HarnessError::invalid(format!("csv buffer: {e}")))
    }

    fn json_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }
}

pub const RECORD_HEADER: [&str; 17] = [
    "method",
    "grid",
    "samples",
    "n",
    "m",
    "d",
    "trial",
    "generator",
    "settings",
    "data_seed",
    "estimator_seed",
    "mse",
    "bias_norm",
    "variance_trace",
    "wall_time_s",
    "peak_alloc_bytes",
    "status",
];

impl Report for ExperimentReport {
    fn stem(&self) -> &str {
        &self.metadata.command
    }

    fn csv_header(&self) -> Vec<&'static str> {
        RECORD_HEADER.to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.grid.to_string(),
                    r.samples.to_string(),
                    r.n.to_string(),
                    r.m.to_string(),
                    r.d.to_string(),
                    r.trial.to_string(),
                    r.generator.clone(),
                    r.settings.clone(),
                    r.data_seed.to_string(),
                    r.estimator_seed.to_string(),
                    opt_f64(r.mse),
                    opt_f64(r.bias_norm),
                    opt_f64(r.variance_trace),
                    opt_f64(r.wall_time_s),
                    opt_u64(r.peak_alloc_bytes),
                    r.status.clone(),
                ]
            })
            .collect()
    }

    fn svg(&self) -> Option<String> {
        let mut methods: Vec<&str> = Vec::new();
        for a in &self.summary {
            if !methods.contains(&a.method.as_str()) {
                methods.push(&a.method);
            }
        }
        let timing = self.summary.iter().any(|a| a.median_wall_time_s.is_some());
        let series: Vec<Series> = methods
            .iter()
            .map(|m| Series {
                label: m.to_string(),
                points: self
                    .summary
                    .iter()
                    .filter(|a| a.method == *m)
                    .filter_map(|a| {
                        if timing {
                            a.median_wall_time_s.map(|t| (a.n as f64, t))
                        } else {
                            a.mean_mse.map(|v| (a.grid as f64, v))
                        }
                    })
                    .collect(),
            })
            .collect();
        Some(if timing {
            line_chart("Wall time against sequence length", "N", "seconds", &series)
        } else {
            line_chart("MSE against number of samples", "samples", "mean MSE", &series)
        })
    }
}

/// Writes `<out_dir>/<stem>.<ext>` for each requested format and returns
/// the paths written. An empty format list writes nothing.
pub fn emit_report<R: Report>(report: &R, formats: &[Format], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if formats.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut written = Vec::new();
    for &format in formats {
        let bytes = match format {
            Format::Csv => report.csv_bytes()?,
            Format::Json => report.json_bytes()?,
            Format::Svg => match report.svg() {
                Some(svg) => svg.into_bytes(),
                None => continue,
            },
        };
        let path = out_dir.join(format!("{}.{}", report.stem(), format.extension()));
        fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
