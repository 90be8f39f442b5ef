use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use muse_core::embedding_store::file_checksum;
use muse_core::{Mode, MuseError, Result};
use serde::Serialize;

/// Written as `run_manifest.json` by every subcommand. Holds no timestamps
/// or output paths so identical runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: Option<u64>,
    pub mode: Mode,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Output directory plus bookkeeping for the run manifest.
pub struct Run {
    pub command: &'static str,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub mode: Mode,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    pub fn new(command: &'static str, out: &Path, seed: Option<u64>, mode: Mode) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| MuseError::io(out, e))?;
        Ok(Run {
            command,
            out: out.to_path_buf(),
            seed,
            mode,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn input(&mut self, name: String, checksum: String) {
        self.inputs.insert(name, checksum);
    }

    /// Records the checksum of an artifact already written under `out`.
    pub fn output(&mut self, name: &str) -> Result<()> {
        let sum = file_checksum(self.path(name))?;
        self.outputs.insert(name.to_string(), sum);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| MuseError::io(&path, e))?;
        self.output(name)
    }

    pub fn finish<C: Serialize>(self, config: &C) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            mode: self.mode,
            config: serde_json::to_value(config)?,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.out.join("run_manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| MuseError::io(&path, e))
    }
}
