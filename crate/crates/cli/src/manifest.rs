//! Run manifests and dataset listings.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileRecord {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// JSON record written by every command. Contains no timestamps, so a rerun
/// with the same inputs reproduces it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub parameters: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, parameters: impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            parameters: serde_json::to_value(parameters)?,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: serde_json::Map::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.metrics.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// `out.png` -> `out.manifest.json`; directories get `manifest.json` inside.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.join("manifest.json");
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `dataset.json` written by `gen-data`: sequence directories relative to
/// the file's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pde: String,
    pub sequences: Vec<String>,
}

pub const DATASET_FILE: &str = "dataset.json";

impl DatasetManifest {
    /// Accepts either the JSON file or the directory holding it. Returns the
    /// manifest and the absolute sequence directories.
    pub fn load(path: &Path) -> Result<(Self, Vec<PathBuf>)> {
        let file = if path.is_dir() {
            path.join(DATASET_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let ds: DatasetManifest = serde_json::from_str(&text)
            .map_err(blade_core::BladeError::from)
            .with_context(|| format!("parsing {}", file.display()))?;
        let base = file.parent().unwrap_or(Path::new("."));
        let dirs = ds.sequences.iter().map(|s| base.join(s)).collect();
        Ok((ds, dirs))
    }
}
