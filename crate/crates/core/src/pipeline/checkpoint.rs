use super::provenance::file_digest;
use super::PipelineError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// The new collection has been scored and split.
    Partitioned,
    /// Every artifact of the period is on disk.
    Complete,
}

/// Stages a period directory has finished, with digests of the artifacts each wrote.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub period: u32,
    pub stages: BTreeSet<Stage>,
    pub artifacts: BTreeMap<String, String>,
}

impl Checkpoint {
    pub const FILE: &'static str = "checkpoint.json";

    pub fn new(period: u32) -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            period,
            ..Self::default()
        }
    }

    /// Reads `dir/checkpoint.json`, or a fresh checkpoint when there is none.
    pub fn load(dir: &Path, period: u32) -> Result<Self, PipelineError> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(Self::new(period));
        }
        let text = std::fs::read_to_string(&path).map_err(PipelineError::io(path.display().to_string()))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Decode {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Marks `stage` done after checking that the listed artifacts still match their
    /// recorded digests, then records digests for the new ones.
    pub fn mark(&mut self, dir: &Path, stage: Stage, artifacts: &[&str]) -> Result<(), PipelineError> {
        for name in artifacts {
            self.artifacts
                .insert((*name).to_string(), file_digest(&dir.join(name))?);
        }
        self.stages.insert(stage);
        write_atomic(&dir.join(Self::FILE), &to_json(self))
    }

    /// Whether every recorded artifact is still present and unchanged.
    pub fn verify(&self, dir: &Path) -> Result<(), PipelineError> {
        for (name, digest) in &self.artifacts {
            let found = file_digest(&dir.join(name))?;
            if &found != digest {
                return Err(PipelineError::Decode {
                    context: dir.join(name).display().to_string(),
                    message: format!("digest {found} does not match checkpoint {digest}"),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

/// Write to a sibling temp file, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, contents: &str) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(PipelineError::io(tmp.display().to_string()))?;
    std::fs::rename(&tmp, path).map_err(PipelineError::io(path.display().to_string()))
}
