//! Run manifests written next to every output file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Digest algorithm recorded in every manifest.
pub const DIGEST: &str = "sha256";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub digest_algorithm: &'static str,
    pub inputs: Vec<FileDigest>,
    pub output: FileDigest,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub started: String,
    pub finished: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `<output>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// One subcommand invocation: records what was read and writes each output
/// together with its manifest.
#[derive(Debug)]
pub struct Run {
    subcommand: String,
    argv: Vec<String>,
    threads: Option<usize>,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    started: String,
    written: Vec<PathBuf>,
}

impl Run {
    pub fn new(subcommand: &str, argv: Vec<String>, threads: Option<usize>) -> Self {
        Run {
            subcommand: subcommand.to_string(),
            argv,
            threads,
            seed: None,
            inputs: Vec::new(),
            started: now(),
            written: Vec::new(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Reads an input file as UTF-8 and records its digest.
    pub fn read(&mut self, path: &Path) -> Result<String> {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        String::from_utf8(bytes).with_context(|| format!("{} is not valid UTF-8", path.display()))
    }

    /// Writes an output file and its manifest.
    pub fn write(&mut self, path: &Path, content: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
        }
        fs::write(path, content).with_context(|| format!("cannot write {}", path.display()))?;
        let manifest = RunManifest {
            tool: "microstat",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand.clone(),
            argv: self.argv.clone(),
            digest_algorithm: DIGEST,
            inputs: self.inputs.clone(),
            output: FileDigest {
                path: path.display().to_string(),
                sha256: sha256_hex(content.as_bytes()),
            },
            seed: self.seed,
            threads: self.threads,
            started: self.started.clone(),
            finished: now(),
        };
        let mpath = manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&mpath, text + "\n").with_context(|| format!("cannot write {}", mpath.display()))?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}
