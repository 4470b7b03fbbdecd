//! Result files. Every file starts with provenance lines: tool version,
//! command, configuration hash and seed.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub command: &'static str,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    /// `key: value` lines for CSV comment headers.
    pub fn header_lines(&self) -> Vec<String> {
        vec![
            format!("version: {VERSION}"),
            format!("command: {}", self.command),
            format!("config_sha256: {}", self.config_sha256),
            format!("seed: {}", self.seed),
        ]
    }

    /// A JSON object holding the provenance keys, to be extended with results.
    pub fn summary(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("version".into(), VERSION.into());
        m.insert("command".into(), self.command.into());
        m.insert("config_sha256".into(), self.config_sha256.clone().into());
        m.insert("seed".into(), self.seed.into());
        m
    }
}

/// Collects the files a command writes into its output directory.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_path_buf(), source })?;
        Ok(OutputDir { dir: dir.to_path_buf(), written: Vec::new() })
    }

    /// Renders `name` in memory through `fill`, then writes it in one go.
    pub fn write<F>(&mut self, name: &str, fill: F) -> CliResult<PathBuf>
    where
        F: FnOnce(&mut Vec<u8>) -> CliResult<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        let path = self.dir.join(name);
        std::fs::write(&path, buf).map_err(|source| CliError::Output { path: path.clone(), source })?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> CliResult<PathBuf> {
        self.write(name, |w| {
            let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
            text.push('\n');
            w.extend_from_slice(text.as_bytes());
            Ok(())
        })
    }
}

/// Writes `# key: value` comment lines.
pub fn comment_header(w: &mut Vec<u8>, prov: &Provenance) {
    for line in prov.header_lines() {
        w.extend_from_slice(format!("# {line}\n").as_bytes());
    }
}

/// JSON number, or null for non-finite values (JSON has no NaN).
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}
