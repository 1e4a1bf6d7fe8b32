use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT: &str = "dsbert-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// Written next to every artifact. `args` holds the fully resolved flags, so
/// passing the manifest back through `--config` repeats the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub args: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, args: &impl Serialize, seed: Option<u64>, started_unix: u64) -> Result<Self> {
        Ok(Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool: env!("CARGO_BIN_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: serde_json::to_value(args)?,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix,
            finished_unix: 0,
        })
    }

    pub fn finish(mut self, inputs: &[&Path], outputs: &[&Path], manifest_path: &Path) -> Result<()> {
        self.inputs = inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?;
        self.outputs = outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?;
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(manifest_path, text + "\n").with_context(|| format!("writing {}", manifest_path.display()))
    }
}

/// Manifest path for a single-file artifact: `out.json` -> `out.manifest.json`.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}
