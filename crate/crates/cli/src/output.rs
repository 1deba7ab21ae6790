//! Write-once output directory. Every file is created fresh; an existing
//! file is never overwritten.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{CliError, Result};

pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|source| CliError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn open(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|source| CliError::Io { path, source })?;
        self.written.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    /// Creates `name` and hands a buffered writer to `f`.
    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> terlab::Result<()>,
    {
        let mut out = self.open(name)?;
        let path = self.path(name);
        f(&mut out).map_err(|e| match e {
            terlab::Error::Io(source) => CliError::Io { path: path.clone(), source },
            other => CliError::Core(other),
        })?;
        out.flush().map_err(|source| CliError::Io { path, source })
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("json values always serialise");
        self.write_with(name, |out| {
            writeln!(out, "{text}")?;
            Ok(())
        })
    }

    /// `manifest.json`: the command, resolved settings and every output.
    pub fn write_manifest(&mut self, command: &str, seed: u64, settings: Value) -> Result<()> {
        let outputs = self.written.clone();
        let manifest = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "settings": settings,
            "outputs": outputs,
        });
        self.write_json("manifest.json", &manifest)
    }
}
