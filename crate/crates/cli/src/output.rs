//! Output files: CSV tables, JSON summaries, text reports and the run
//! manifest. Every file starts with the config hash and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};

use crate::config::ExperimentConfig;

/// Writes the files of one command invocation into a directory.
pub struct OutputDir {
    dir: PathBuf,
    hash: String,
    seed: u64,
    csv: bool,
    json: bool,
    written: Vec<String>,
}

/// A JSON number, or a string for values JSON cannot represent.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

pub fn nums(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|x| num(*x)).collect())
}

impl OutputDir {
    pub fn create(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash: config.hash(),
            seed: config.seed(),
            csv: config.wants("csv"),
            json: config.wants("json"),
            written: Vec::new(),
        })
    }

    /// A sibling writer for a sub-directory sharing hash and seed.
    pub fn subdir(&self, name: &str) -> Result<Self> {
        let dir = self.dir.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            hash: self.hash.clone(),
            seed: self.seed,
            csv: self.csv,
            json: self.json,
            written: Vec::new(),
        })
    }

    fn header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash, self.seed)
    }

    fn write(&mut self, name: &str, body: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let mut bytes = self.header().into_bytes();
        bytes.extend_from_slice(body);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// CSV table with a header row, quoted per RFC 4180 where needed.
    pub fn csv<I>(&mut self, name: &str, columns: &[String], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        if !self.csv {
            return Ok(());
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(columns)?;
        for row in rows {
            w.write_record(&row)?;
        }
        let body = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write(name, &body)
    }

    /// JSON document; the header fields are stored under `header`.
    pub fn json(&mut self, name: &str, value: Value) -> Result<()> {
        if !self.json {
            return Ok(());
        }
        let mut doc = Map::new();
        doc.insert(
            "header".into(),
            json!({ "config_hash": self.hash, "seed": self.seed }),
        );
        match value {
            Value::Object(map) => doc.extend(map),
            other => {
                doc.insert("data".into(), other);
            }
        }
        let mut body = serde_json::to_vec_pretty(&Value::Object(doc))?;
        body.push(b'\n');
        self.write_raw_json(name, body)
    }

    fn write_raw_json(&mut self, name: &str, body: Vec<u8>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Plain text with the header comment.
    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        self.write(name, body.as_bytes())
    }

    /// Absorbs the file list of a sub-directory writer.
    pub fn adopt(&mut self, sub: OutputDir) {
        let prefix = sub
            .dir
            .strip_prefix(&self.dir)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        for f in sub.written {
            self.written.push(prefix.join(f).to_string_lossy().into_owned());
        }
    }

    /// `manifest.json`: command, resolved config, seed, extra notes and the
    /// files written. Always written, whatever the selected formats.
    pub fn manifest(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        notes: BTreeMap<String, Value>,
    ) -> Result<()> {
        let mut files = self.written.clone();
        files.sort();
        let doc = json!({
            "header": { "config_hash": self.hash, "seed": self.seed },
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "config_toml": config.canonical(),
            "notes": notes,
            "files": files,
        });
        let mut body = serde_json::to_vec_pretty(&doc)?;
        body.push(b'\n');
        self.write_raw_json("manifest.json", body)
    }
}

/// Formats a float for a CSV cell.
pub fn cell(x: f64) -> String {
    x.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_cells_are_quoted_per_rfc4180() {
        let tmp = tempfile::TempDir::new().unwrap();
        let config = ExperimentConfig::default();
        let mut out = OutputDir::create(tmp.path(), &config).unwrap();
        let columns = ["face".to_string(), "value".to_string()];
        let rows = vec![
            vec!["edge:phi1=2|4".into(), "1".into()],
            vec!["a, \"b\"".into(), "2".into()],
        ];
        out.csv("t.csv", &columns, rows).unwrap();
        let text = fs::read_to_string(tmp.path().join("t.csv")).unwrap();
        let body: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(body, ["face,value", "edge:phi1=2|4,1", "\"a, \"\"b\"\"\",2"]);
        assert!(text.starts_with(&format!("# config_hash={} seed=0\n", config.hash())));
    }

    #[test]
    fn non_finite_numbers_become_strings() {
        assert_eq!(num(f64::NEG_INFINITY), json!("-inf"));
        assert_eq!(num(0.5), json!(0.5));
    }
}
