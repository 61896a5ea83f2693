use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::io::{read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one command run. Output hashes cover every file under the
/// output directory except the manifest itself, keyed by relative path with
/// `/` separators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input path as given on the command line to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::from(e).in_file(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn begin(command: &str, config: &impl Serialize) -> CliResult<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_s: now(),
            finished_unix_s: 0.0,
        })
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hash the contents of `out_dir` and write the manifest into it.
    pub fn finish(mut self, out_dir: &Path) -> CliResult<Self> {
        let mut files = Vec::new();
        collect_files(out_dir, &mut files)?;
        let manifest_path = out_dir.join(MANIFEST_FILE);
        self.outputs = files
            .iter()
            .filter(|p| **p != manifest_path)
            .map(|p| {
                let rel = p.strip_prefix(out_dir).expect("listed under the output directory");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                Ok((key, sha256_file(p)?))
            })
            .collect::<CliResult<_>>()?;
        self.finished_unix_s = now();
        write_json(&manifest_path, &self)?;
        Ok(self)
    }

    pub fn load(out_dir: &Path) -> CliResult<Self> {
        read_json(&out_dir.join(MANIFEST_FILE))
    }
}
