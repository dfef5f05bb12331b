use super::PipelineError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(PipelineError::io(path.display().to_string()))?;
    Ok(sha256_hex(&bytes))
}

/// First line of the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceHeader {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: crate::config::Seeds,
    pub datagen_seed: u64,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub seq: u64,
    pub period: u32,
    pub operation: String,
    /// Artifact names to SHA-256 digests.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Append-only JSON-lines log of every stage that produced an artifact.
#[derive(Debug)]
pub struct ProvenanceLog {
    path: PathBuf,
    header: ProvenanceHeader,
    entries: Vec<ProvenanceEntry>,
}

fn decode<T: serde::de::DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T, PipelineError> {
    serde_json::from_str(line).map_err(|e| PipelineError::Decode {
        context: format!("{} line {line_no}", path.display()),
        message: e.to_string(),
    })
}

impl ProvenanceLog {
    /// Creates the log with `header`, or reopens an existing one whose header must carry
    /// the same config hash.
    pub fn open(path: &Path, header: ProvenanceHeader) -> Result<Self, PipelineError> {
        if !path.exists() {
            let mut f = File::create(path).map_err(PipelineError::io(path.display().to_string()))?;
            let line = serde_json::to_string(&header).expect("header serializes");
            writeln!(f, "{line}").map_err(PipelineError::io(path.display().to_string()))?;
            return Ok(Self {
                path: path.to_owned(),
                header,
                entries: vec![],
            });
        }
        let existing = Self::read(path)?;
        if existing.header.config_hash != header.config_hash {
            return Err(PipelineError::ConfigMismatch {
                dir: path.display().to_string(),
                found: existing.header.config_hash,
                expected: header.config_hash,
            });
        }
        Ok(existing)
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let f = File::open(path).map_err(PipelineError::io(path.display().to_string()))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .transpose()
            .map_err(PipelineError::io(path.display().to_string()))?
            .ok_or_else(|| PipelineError::Decode {
                context: path.display().to_string(),
                message: "empty provenance log".into(),
            })?;
        let header = decode(path, 1, &first)?;
        let mut entries = vec![];
        for (i, line) in lines.enumerate() {
            let line = line.map_err(PipelineError::io(path.display().to_string()))?;
            if !line.trim().is_empty() {
                entries.push(decode(path, i + 2, &line)?);
            }
        }
        Ok(Self {
            path: path.to_owned(),
            header,
            entries,
        })
    }

    pub fn header(&self) -> &ProvenanceHeader {
        &self.header
    }

    pub fn entries(&self) -> &[ProvenanceEntry] {
        &self.entries
    }

    pub fn append(
        &mut self,
        period: u32,
        operation: &str,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
    ) -> Result<&ProvenanceEntry, PipelineError> {
        let entry = ProvenanceEntry {
            seq: self.entries.len() as u64,
            period,
            operation: operation.into(),
            inputs,
            outputs,
        };
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(PipelineError::io(self.path.display().to_string()))?;
        let line = serde_json::to_string(&entry).expect("entry serializes");
        writeln!(f, "{line}").map_err(PipelineError::io(self.path.display().to_string()))?;
        f.sync_data()
            .map_err(PipelineError::io(self.path.display().to_string()))?;
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }
}
