//! Output directory bookkeeping and provenance records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProvenanceRecord {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<OutputFile>,
}

/// Files written by one run, all inside one directory. On failure every
/// recorded file is removed again.
pub struct OutputDir {
    dir: PathBuf,
    created: bool,
    written: Vec<OutputFile>,
}

impl OutputDir {
    /// Create the directory if needed and prove it is writable.
    pub fn prepare(dir: &Path) -> Result<Self, CliError> {
        let created = !dir.exists();
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("output directory {} is not usable: {e}", dir.display())))?;
        let probe = dir.join(".mkv-lan-write-probe");
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
        Ok(OutputDir { dir: dir.to_path_buf(), created, written: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Write `name` (a bare file name) and record its checksum.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        if name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(CliError::Config(format!("refusing to write `{name}` outside the output directory")));
        }
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path)?;
        f.write_all(bytes)?;
        self.written.push(OutputFile { file: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_vec_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        text.push(b'\n');
        self.write(name, &text)
    }

    pub fn outputs(&self) -> &[OutputFile] {
        &self.written
    }

    /// Remove everything this run wrote (and the directory if it made it).
    pub fn discard(self) {
        for f in &self.written {
            let _ = fs::remove_file(self.dir.join(&f.file));
        }
        if self.created {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
