//! Columnar result files and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Result, SarError};

const FORMAT_LINE: &str = "# sar-columns/1";

/// Hex SHA-256 of the canonical TOML form of a configuration.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let text = cfg.to_toml_string()?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Metadata written at the top of every result file.
#[derive(Clone, Debug, PartialEq)]
pub struct FileHeader {
    pub master_seed: u64,
    pub config_hash: String,
    pub extra: Vec<(String, String)>,
}

impl FileHeader {
    pub fn new(master_seed: u64, config_hash: impl Into<String>) -> Self {
        Self { master_seed, config_hash: config_hash.into(), extra: Vec::new() }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.extra.push((key.into(), value.to_string()));
        self
    }
}

/// Renders a tab-separated table. Numbers use round-trip exponent notation
/// so that identical data give identical bytes.
pub fn render_columns(header: &FileHeader, columns: &[(&str, &[f64])]) -> Result<String> {
    let rows = columns.first().map_or(0, |c| c.1.len());
    if let Some((name, col)) = columns.iter().find(|c| c.1.len() != rows) {
        return Err(SarError::config(format!("column {name} has {} rows, expected {rows}", col.len())));
    }
    let mut out = String::new();
    out.push_str(FORMAT_LINE);
    out.push('\n');
    let _ = writeln!(out, "# master_seed = {}", header.master_seed);
    let _ = writeln!(out, "# config_hash = {}", header.config_hash);
    for (k, v) in &header.extra {
        let _ = writeln!(out, "# {k} = {v}");
    }
    let names: Vec<&str> = columns.iter().map(|c| c.0).collect();
    out.push_str(&names.join("\t"));
    out.push('\n');
    for i in 0..rows {
        for (k, (_, col)) in columns.iter().enumerate() {
            if k > 0 {
                out.push('\t');
            }
            let _ = write!(out, "{:.17e}", col[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_columns(path: impl AsRef<Path>, header: &FileHeader, columns: &[(&str, &[f64])]) -> Result<()> {
    std::fs::write(path, render_columns(header, columns)?)?;
    Ok(())
}

/// Parsed columnar file.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnFile {
    pub meta: BTreeMap<String, String>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl ColumnFile {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }
}

pub fn read_columns(path: impl AsRef<Path>) -> Result<ColumnFile> {
    let text = std::fs::read_to_string(path)?;
    parse_columns(&text)
}

pub fn parse_columns(text: &str) -> Result<ColumnFile> {
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(SarError::Parse("missing column-file format line".into()));
    }
    let mut meta = BTreeMap::new();
    let mut names = None;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some((k, v)) = rest.split_once(" = ") {
                meta.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        match &names {
            None => {
                let n: Vec<String> = line.split('\t').map(str::to_string).collect();
                columns = vec![Vec::new(); n.len()];
                names = Some(n);
            }
            Some(n) => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != n.len() {
                    return Err(SarError::Parse(format!("row has {} fields, expected {}", fields.len(), n.len())));
                }
                for (col, f) in columns.iter_mut().zip(fields) {
                    col.push(f.parse().map_err(|e| SarError::Parse(format!("bad number {f:?}: {e}")))?);
                }
            }
        }
    }
    Ok(ColumnFile { meta, names: names.unwrap_or_default(), columns })
}

/// Structured record of one CLI run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub files: Vec<PathBuf>,
    pub timings_s: BTreeMap<String, f64>,
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: cfg.master_seed,
            config_hash: config_hash(cfg)?,
            config: cfg.clone(),
            files: Vec::new(),
            timings_s: BTreeMap::new(),
            results: serde_json::Value::Null,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SarError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_round_trip() {
        let h = FileHeader::new(42, "abc").with("t_star", 1.5);
        let a = [1.0, -2.5e-300, std::f64::consts::PI];
        let b = [0.0, 1e10, -0.0];
        let text = render_columns(&h, &[("a", &a), ("b", &b)]).unwrap();
        let parsed = parse_columns(&text).unwrap();
        assert_eq!(parsed.meta["master_seed"], "42");
        assert_eq!(parsed.meta["t_star"], "1.5");
        assert_eq!(parsed.column("a").unwrap(), &a);
        assert_eq!(parsed.column("b").unwrap(), &b);
        assert!(render_columns(&h, &[("a", &a), ("b", &b[..2])]).is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { master_seed: 1, ..ExperimentConfig::default() };
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }
}
