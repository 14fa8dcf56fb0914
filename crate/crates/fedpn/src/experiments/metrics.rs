//! Result tables: rectangular metrics tables written as CSV and JSONL with
//! an adjacent manifest, and per-class accuracy matrices.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellValue {
    Real(f64),
    Int(i64),
    Text(String),
}

impl CellValue {
    fn csv(&self) -> String {
        match self {
            CellValue::Real(v) => format!("{}", v),
            CellValue::Int(v) => format!("{}", v),
            CellValue::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CellValue::Real(v) => Some(*v),
            CellValue::Int(v) => Some(*v as f64),
            CellValue::Text(_) => None,
        }
    }
}

/// Reproducibility metadata carried by every table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    /// Written to the manifest only, so metric files stay byte-identical
    /// across reruns.
    #[serde(default)]
    pub timestamp: Option<String>,
}

/// Rectangular named-column table of experiment results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<CellValue>>,
    pub metadata: TableMetadata,
}

impl MetricsTable {
    pub fn new(experiment: &str, config_hash: &str, seed: u64, columns: Vec<&str>) -> Self {
        MetricsTable {
            columns: columns.into_iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            metadata: TableMetadata {
                experiment: experiment.to_string(),
                config_hash: config_hash.to_string(),
                seed,
                timestamp: None,
            },
        }
    }

    pub fn push_row(&mut self, row: Vec<CellValue>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::contract(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of a real-valued column filtered by a text-column predicate.
    pub fn filtered_reals(
        &self,
        value_column: &str,
        filters: &[(&str, &str)],
    ) -> Result<Vec<f64>> {
        let vi = self
            .column_index(value_column)
            .ok_or_else(|| Error::contract(format!("no column {}", value_column)))?;
        let mut filter_idx = Vec::new();
        for (col, want) in filters {
            let ci = self
                .column_index(col)
                .ok_or_else(|| Error::contract(format!("no column {}", col)))?;
            filter_idx.push((ci, want.to_string()));
        }
        Ok(self
            .rows
            .iter()
            .filter(|row| {
                filter_idx.iter().all(|(ci, want)| match &row[*ci] {
                    CellValue::Text(s) => s == want,
                    CellValue::Int(v) => v.to_string() == *want,
                    CellValue::Real(v) => v.to_string() == *want,
                })
            })
            .filter_map(|row| row[vi].as_f64())
            .collect())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| c.csv()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for row in &self.rows {
            let obj: BTreeMap<&str, &CellValue> = self
                .columns
                .iter()
                .map(|c| c.as_str())
                .zip(row.iter())
                .collect();
            let line =
                serde_json::to_string(&obj).map_err(|e| Error::Serialization(e.to_string()))?;
            writeln!(w, "{}", line)?;
        }
        Ok(())
    }

    /// Write `<dir>/<experiment>-<hash>.csv`, `.jsonl` and
    /// `<...>.manifest.json`; returns the CSV path.
    pub fn write_files(&self, dir: &Path, manifest_extra: &serde_json::Value) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("{}-{}", self.metadata.experiment, self.metadata.config_hash);
        let csv_path = dir.join(format!("{}.csv", stem));
        let jsonl_path = dir.join(format!("{}.jsonl", stem));
        let manifest_path = dir.join(format!("{}.manifest.json", stem));
        let mut csv = Vec::new();
        self.write_csv(&mut csv)?;
        std::fs::write(&csv_path, csv)?;
        let mut jsonl = Vec::new();
        self.write_jsonl(&mut jsonl)?;
        std::fs::write(&jsonl_path, jsonl)?;
        let manifest = serde_json::json!({
            "experiment": self.metadata.experiment,
            "config_hash": self.metadata.config_hash,
            "seed": self.metadata.seed,
            "timestamp": self.metadata.timestamp,
            "code_version": env!("CARGO_PKG_VERSION"),
            "rows": self.rows.len(),
            "columns": self.columns,
            "config": manifest_extra,
        });
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Serialization(e.to_string()))?,
        )?;
        Ok(csv_path)
    }
}

/// b x K accuracy matrix for one model family; `None` marks classes with no
/// evaluation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub model_family: String,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn n_clients(&self) -> usize {
        self.entries.len()
    }

    pub fn n_classes(&self) -> usize {
        self.entries.first().map_or(0, |r| r.len())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.n_classes()).map(|c| format!("class{}", c)).collect();
        writeln!(w, "client,{}", header.join(","))?;
        for (i, row) in self.entries.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|e| match e {
                    Some(v) => format!("{}", v),
                    None => "absent".to_string(),
                })
                .collect();
            writeln!(w, "{},{}", i, cells.join(","))?;
        }
        Ok(())
    }
}

/// Stable FNV-1a hex hash of a serializable config, used in artifact names.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_string(config).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{:016x}", h))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::contract("spearman needs two equal-length series"));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        vx += (a - mean).powi(2);
        vy += (b - mean).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::contract("constant series has no rank correlation"));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Mean of a slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Median (averaging the middle pair on even lengths).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
