//! Run directories and their `run.json` provenance record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// An output directory named after the command and a hash of everything
/// that determines its contents, so identical runs land in the same place.
pub struct Run {
    pub command: &'static str,
    pub dir: PathBuf,
    config: Value,
    args: Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    pub fn create(
        command: &'static str,
        root: &Path,
        explicit_dir: Option<&Path>,
        config: Value,
        args: Value,
        inputs: &[&Path],
    ) -> Result<Run> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            hashes.insert(p.display().to_string(), file_sha256(p)?);
        }
        let key = json!({ "command": command, "config": config, "args": args, "inputs": hashes });
        let stamp = &sha256_hex(key.to_string().as_bytes())[..12];
        let dir = match explicit_dir {
            Some(d) => d.to_path_buf(),
            None => root.join(format!("{command}-{stamp}")),
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run {
            command,
            dir,
            config,
            args,
            inputs: hashes,
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file written into the run directory.
    pub fn output(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        std::fs::write(self.path(name), text).with_context(|| format!("writing {name}"))?;
        self.output(name);
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.path(name), text).with_context(|| format!("writing {name}"))?;
        self.output(name);
        Ok(())
    }

    /// Writes `run.json` with content hashes of every registered output.
    pub fn finish(self) -> Result<PathBuf> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), file_sha256(&self.dir.join(name))?);
        }
        let record = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "args": self.args,
            "inputs": self.inputs,
            "outputs": outputs,
        });
        let text = serde_json::to_string_pretty(&record)? + "\n";
        std::fs::write(self.dir.join("run.json"), text).context("writing run.json")?;
        Ok(self.dir)
    }
}
