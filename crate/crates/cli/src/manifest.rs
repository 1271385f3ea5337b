//! Provenance record written next to every produced artifact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mlmp::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub tool_version: String,
    pub config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to sha256, in argument order.
    pub inputs: Vec<(String, String)>,
    /// Digest of version, config hash, seeds and input digests. Equal
    /// identities mean the same outputs for deterministic commands.
    pub identity: String,
    pub outputs: Vec<(String, String)>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// `out.ext` gets `out.ext.manifest.json`; a directory gets `dir/manifest.json`.
pub fn manifest_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("manifest.json")
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}

impl RunManifest {
    /// Digests the inputs and writes the manifest before any work starts.
    pub fn begin(path: PathBuf, config_hash: Option<String>, seeds: &[(String, u64)], inputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), file_digest(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let seeds: BTreeMap<String, u64> = seeds.iter().cloned().collect();
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let digests: Vec<&str> = inputs.iter().map(|(_, d)| d.as_str()).collect();
        let id = serde_json::to_vec(&(&tool_version, &config_hash, &seeds, digests)).expect("serializes");
        let m = RunManifest {
            command: std::env::args().collect(),
            tool_version,
            config_hash,
            seeds,
            inputs,
            identity: hex::encode(Sha256::digest(id)),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: None,
            path,
        };
        m.write()?;
        Ok(m)
    }

    /// Records output digests and the end time.
    pub fn finish(mut self, outputs: &[PathBuf]) -> Result<()> {
        self.outputs = outputs
            .iter()
            .map(|p| Ok((p.display().to_string(), file_digest(p)?)))
            .collect::<Result<Vec<_>>>()?;
        self.finished_at = Some(now());
        self.write()
    }

    fn write(&self) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&self.path, json + "\n").map_err(|e| Error::io(&self.path, e))
    }
}
