use super::queue::{AnnotationTask, TaskId};
use super::AnnotationError;
use crate::CategoryId;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

/// How hard each journal append is pushed to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// `fsync` after every append.
    #[default]
    Sync,
    /// Flush to the OS only.
    Flush,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub(crate) enum JournalEntry {
    Enqueued {
        task: AnnotationTask,
    },
    Claimed {
        task_id: TaskId,
        annotator: String,
        at_ms: u64,
        lease_until_ms: u64,
    },
    Released {
        task_id: TaskId,
        at_ms: u64,
    },
    Labeled {
        task_id: TaskId,
        label: CategoryId,
        annotator: Option<String>,
        at_ms: u64,
    },
    Expired {
        task_id: TaskId,
        at_ms: u64,
    },
}

/// Append-only JSON-lines write-ahead log.
#[derive(Debug)]
pub(crate) struct Journal {
    path: PathBuf,
    file: File,
    durability: Durability,
}

impl Journal {
    /// Opens (creating if needed) and returns the entries already recorded. A torn final
    /// line left by a crash mid-append is dropped and truncated away.
    pub(crate) fn open(path: &Path, durability: Durability) -> Result<(Self, Vec<JournalEntry>), AnnotationError> {
        let mut entries = vec![];
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut lines: Vec<(String, bool)> = vec![];
            let mut r = reader;
            loop {
                let mut buf = String::new();
                let n = r.read_line(&mut buf)?;
                if n == 0 {
                    break;
                }
                let complete = buf.ends_with('\n');
                lines.push((buf, complete));
            }
            let last = lines.len();
            for (i, (line, complete)) in lines.iter().enumerate() {
                let text = line.trim_end_matches('\n');
                match serde_json::from_str::<JournalEntry>(text) {
                    Ok(e) if *complete => {
                        entries.push(e);
                        valid_len += line.len() as u64;
                    }
                    _ if i + 1 == last && !complete => break,
                    Ok(_) => unreachable!("only the final line can lack a newline"),
                    Err(e) => {
                        return Err(AnnotationError::Journal {
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(path)?;
        file.set_len(valid_len)?;
        file.seek(SeekFrom::End(0))?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                durability,
            },
            entries,
        ))
    }

    pub(crate) fn append(&mut self, entries: &[JournalEntry]) -> Result<(), AnnotationError> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut buf, e).map_err(std::io::Error::other)?;
            buf.push(b'\n');
        }
        self.file.write_all(&buf)?;
        self.file.flush()?;
        if self.durability == Durability::Sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    pub(crate) fn path(&self) -> &Path {
        &self.path
    }
}
