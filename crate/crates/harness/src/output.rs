//! Run directories: CSV tables, the schema file and the manifest.
//!
//! Files are written only through [`RunDir`], which records every name so
//! the manifest lists each emitted file exactly once.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const ARTIFACT: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Column names and their meaning.
pub type Columns = &'static [(&'static str, &'static str)];

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub struct RunDir {
    root: PathBuf,
    suite: &'static str,
    files: Vec<String>,
    schema: String,
}

impl RunDir {
    /// Creates `<out>/<suite>` and writes the canonical configuration.
    pub fn create(cfg: &ExperimentConfig, suite: &'static str) -> Result<Self> {
        let root = cfg.out.join(suite);
        std::fs::create_dir_all(&root).map_err(|e| HarnessError::io(format!("creating {}", root.display()), e))?;
        let mut dir = Self { root, suite, files: Vec::new(), schema: String::new() };
        dir.text("config.txt", &cfg.canonical())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn claim(&mut self, name: &str) -> Result<PathBuf> {
        if self.files.iter().any(|f| f == name) || name == "manifest.txt" || name == "schema.txt" {
            return Err(HarnessError::Config(format!("output file {name} written twice")));
        }
        self.files.push(name.to_string());
        Ok(self.root.join(name))
    }

    pub fn text(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.claim(name)?;
        std::fs::write(&path, content).map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))
    }

    /// Writes a CSV table; every row must have one field per column.
    pub fn csv(&mut self, name: &str, columns: Columns, rows: &[Vec<String>]) -> Result<()> {
        if let Some(row) = rows.iter().find(|r| r.len() != columns.len()) {
            return Err(HarnessError::Config(format!("{name}: row with {} fields, {} columns", row.len(), columns.len())));
        }
        let path = self.claim(name)?;
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(columns.iter().map(|(c, _)| *c))?;
        for row in rows {
            writer.write_record(row)?;
        }
        writer.flush().map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))?;
        let _ = writeln!(self.schema, "[{name}]");
        for (c, doc) in columns {
            let _ = writeln!(self.schema, "{c}: {doc}");
        }
        self.schema.push('\n');
        Ok(())
    }

    /// Two-column `metric,value` table.
    pub fn summary(&mut self, name: &str, entries: &[(&str, String)]) -> Result<()> {
        const COLUMNS: Columns = &[("metric", "summary quantity"), ("value", "its value")];
        let rows: Vec<Vec<String>> = entries.iter().map(|(k, v)| vec![k.to_string(), v.clone()]).collect();
        self.csv(name, COLUMNS, &rows)
    }

    /// Writes the schema and the manifest; returns the run directory.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let schema = std::mem::take(&mut self.schema);
        let path = self.root.join("schema.txt");
        std::fs::write(&path, schema).map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))?;
        self.files.push("schema.txt".into());
        let mut manifest = String::new();
        let _ = writeln!(manifest, "artifact = {ARTIFACT}");
        let _ = writeln!(manifest, "suite = {}", self.suite);
        let _ = writeln!(manifest, "config_hash = {}", cfg.hash());
        let _ = writeln!(manifest, "seed = {}", cfg.seed);
        for f in &self.files {
            let _ = writeln!(manifest, "file = {f}");
        }
        let path = self.root.join("manifest.txt");
        std::fs::write(&path, manifest).map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))?;
        Ok(self.root)
    }
}
