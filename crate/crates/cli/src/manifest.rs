//! Run manifests: enough to re-run a command and check its outputs.

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub kind: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Directory the command ran in; relative paths in `argv` resolve here.
    pub cwd: PathBuf,
    /// Resolved plan or config.
    pub config: serde_json::Value,
    pub plan_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<OutputFile>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: &[String]) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            cwd: std::env::current_dir().unwrap_or_default(),
            config: serde_json::Value::Null,
            plan_hash: None,
            seeds: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Records a file the command wrote, hashing its current contents.
    pub fn add_output(&mut self, kind: &str, path: &Path) -> io::Result<()> {
        self.outputs.push(OutputFile {
            kind: kind.to_string(),
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes"))
    }

    pub fn load(path: &Path) -> io::Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    io::copy(&mut File::open(path)?, &mut h)?;
    Ok(hex::encode(h.finalize()))
}
