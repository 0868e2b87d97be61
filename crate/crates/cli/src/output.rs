//! Artifact writing: atomic file creation, 17-significant-digit CSV rows,
//! and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

/// Write via a temporary sibling then rename, so partial artifacts never
/// appear under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        CsvWriter { buf: format!("{}\n", header.join(",")) }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.buf.as_bytes())
    }
}

/// Collects run metadata and summary values, then writes the manifest JSON.
pub struct Manifest {
    started: Instant,
    body: serde_json::Map<String, Value>,
    outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: &str, seed: Option<u64>, threads: usize) -> Self {
        let mut body = serde_json::Map::new();
        body.insert("command".into(), json!(command));
        body.insert("config_hash".into(), json!(config_hash));
        body.insert("seed".into(), json!(seed));
        body.insert("threads".into(), json!(threads));
        body.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        Manifest { started: Instant::now(), body, outputs: Vec::new() }
    }

    pub fn insert(&mut self, key: &str, value: Value) {
        self.body.insert(key.into(), value);
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(mut self, path: &Path) -> std::io::Result<()> {
        self.body.insert("outputs".into(), json!(self.outputs));
        self.body
            .insert("wall_time_s".into(), json!(self.started.elapsed().as_secs_f64()));
        let text = serde_json::to_string_pretty(&Value::Object(self.body)).expect("manifest json");
        write_atomic(path, text.as_bytes())
    }
}

pub fn artifact_path(dir: &Path, prefix: &str, name: &str) -> PathBuf {
    dir.join(format!("{prefix}_{name}"))
}
