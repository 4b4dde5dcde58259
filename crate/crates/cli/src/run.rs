//! Run directories: every command writes its outputs under one directory
//! together with `run.json` recording the config, its hash, the seed and
//! the hashes of inputs and outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use indexmap::IndexMap;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the resolved config as sorted `key=value` lines.
pub fn config_hash(config: &IndexMap<String, String>) -> String {
    let mut lines: Vec<String> = config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    lines.sort();
    hex(&Sha256::digest(lines.concat().as_bytes()))
}

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a IndexMap<String, String>,
    inputs: &'a [FileRecord],
    outputs: Vec<FileRecord>,
}

pub struct Run {
    pub dir: PathBuf,
    command: String,
    seed: u64,
    config: IndexMap<String, String>,
    inputs: Vec<FileRecord>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(dir: PathBuf, command: &str, seed: u64, config: IndexMap<String, String>) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        Ok(Self {
            dir,
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileRecord { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Path for an output file, recorded for hashing at the end.
    pub fn output(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.outputs.contains(&p) {
            self.outputs.push(p.clone());
        }
        Ok(p)
    }

    /// Records a file written elsewhere by the command.
    pub fn record(&mut self, path: PathBuf) {
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
    }

    pub fn finish(self) -> Result<()> {
        let outputs = self
            .outputs
            .iter()
            .filter(|p| p.is_file())
            .map(|p| {
                Ok(FileRecord {
                    path: p.strip_prefix(&self.dir).unwrap_or(p).display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: &self.command,
            seed: self.seed,
            config_hash: config_hash(&self.config),
            config: &self.config,
            inputs: &self.inputs,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.dir.join("run.json"), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_order() {
        let mut a = IndexMap::new();
        a.insert("seed".to_string(), "1".to_string());
        a.insert("task".to_string(), "flood".to_string());
        let mut b = IndexMap::new();
        b.insert("task".to_string(), "flood".to_string());
        b.insert("seed".to_string(), "1".to_string());
        assert_eq!(config_hash(&a), config_hash(&b));
        b.insert("seed".to_string(), "2".to_string());
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn manifest_records_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::start(dir.path().join("r"), "eval", 7, IndexMap::new()).unwrap();
        std::fs::write(run.output("metrics.csv").unwrap(), "a\n").unwrap();
        run.finish().unwrap();
        let text = std::fs::read_to_string(dir.path().join("r/run.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["seed"], 7);
        assert_eq!(v["outputs"][0]["path"], "metrics.csv");
        assert_eq!(v["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
    }
}
