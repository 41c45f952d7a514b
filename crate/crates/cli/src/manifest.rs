//! Run manifest: hashes of the resolved config, inputs and artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Resolved config after overrides and seed injection.
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

/// Collects artifacts written to one output directory.
pub struct Run {
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, cfg: &RunConfig, out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
        let config = cfg.to_toml();
        Ok(Run {
            out: out.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                seed: cfg.seed,
                config_sha256: sha256_hex(config.as_bytes()),
                config,
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
            },
        })
    }

    /// Reads an input file and records its hash.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {role} {}: {e}", path.display())))?;
        self.manifest.inputs.insert(role.into(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.artifacts.insert(name.into(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest-<command>.json`; called on success and on failure.
    pub fn finish(&self) -> Result<(), CliError> {
        let path = self.out.join(format!("manifest-{}.json", self.manifest.command));
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}
