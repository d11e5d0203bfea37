//! Run persistence: atomic file writes, the run manifest, and CSV helpers.
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! crashed run never leaves a partial metrics file. Numbers are written with
//! Rust's shortest round-trip formatting, which is deterministic.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes `bytes` to `path` atomically (write-then-rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Run manifest: experiment id, code version, full config, seeds, and a
/// content hash of the canonical config serialization.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub experiment: &'a str,
    pub version: &'a str,
    pub seeds: &'a [u64],
    pub config_sha256: String,
    pub config: &'a C,
}

pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let canonical = serde_json::to_vec(config).context("serializing config")?;
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn write_manifest<C: Serialize>(
    dir: &Path,
    experiment: &str,
    config: &C,
    seeds: &[u64],
) -> Result<()> {
    let manifest = Manifest {
        experiment,
        version: env!("CARGO_PKG_VERSION"),
        seeds,
        config_sha256: config_hash(config)?,
        config,
    };
    let json = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
    write_atomic(&dir.join("manifest.json"), json.as_bytes())
}

/// Accumulates CSV rows in memory and writes the whole table atomically.
pub struct CsvTable {
    header: Vec<&'static str>,
    buf: String,
    rows: usize,
}

impl CsvTable {
    pub fn new(header: &[&'static str]) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "{}", header.join(","));
        Self {
            header: header.to_vec(),
            buf,
            rows: 0,
        }
    }

    pub fn row(&mut self, cells: &[CsvCell]) {
        assert_eq!(cells.len(), self.header.len(), "row width mismatch");
        let line: Vec<String> = cells.iter().map(|c| c.render()).collect();
        let _ = writeln!(self.buf, "{}", line.join(","));
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.buf.as_bytes())
    }
}

/// One CSV cell; floats use shortest round-trip formatting with a `.`
/// decimal separator.
pub enum CsvCell {
    Str(String),
    Int(i64),
    Float(f64),
    Empty,
}

impl CsvCell {
    fn render(&self) -> String {
        match self {
            CsvCell::Str(s) => {
                assert!(!s.contains(','), "cell needs quoting: {s}");
                s.clone()
            }
            CsvCell::Int(v) => v.to_string(),
            CsvCell::Float(v) => format!("{v}"),
            CsvCell::Empty => String::new(),
        }
    }
}

pub fn s(v: impl Into<String>) -> CsvCell {
    CsvCell::Str(v.into())
}

pub fn i(v: usize) -> CsvCell {
    CsvCell::Int(v as i64)
}

pub fn f(v: f64) -> CsvCell {
    CsvCell::Float(v)
}

/// Output directory for a run, defaulting to `runs/<experiment>`.
pub fn run_dir(base: Option<&Path>, experiment: &str) -> PathBuf {
    match base {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("runs").join(experiment),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_tmp() {
        let dir = std::env::temp_dir().join(format!("fls-rec-{}", std::process::id()));
        let path = dir.join("x/y.csv");
        write_atomic(&path, b"a,b\n1,2\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n1,2\n");
        assert!(!path.with_extension("tmp").exists());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn float_cells_round_trip() {
        let mut t = CsvTable::new(&["x"]);
        t.row(&[f(0.1)]);
        t.row(&[f(1.0 / 3.0)]);
        assert!(t.buf.contains("0.1\n"));
        assert!(t.buf.contains("0.3333333333333333\n"));
    }
}
