//! Manifest persistence: `header.json` (config, seed, categories) and `samples.jsonl`
//! with one record per sample. Features are base64 of little-endian f64 bytes.

use super::{CategorySpec, DatagenError, DatasetManifest, GenConfig, Sample, TriggerEvent};
use crate::{CategoryId, SampleId, SCHEMA_VERSION};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const HEADER_FILE: &str = "header.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

#[derive(Debug, Clone)]
pub struct ManifestFiles {
    pub header: PathBuf,
    pub samples: PathBuf,
}

impl ManifestFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            header: dir.join(HEADER_FILE),
            samples: dir.join(SAMPLES_FILE),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    seed: u64,
    config: GenConfig,
    categories: Vec<CategorySpec>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    sample_id: SampleId,
    event_id: u64,
    category_id: CategoryId,
    features: String,
}

fn encode_features(xs: &[f64]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_features(s: &str, dim: usize) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() != dim * 8 {
        return Err(format!(
            "feature payload has {} bytes, expected {}",
            bytes.len(),
            dim * 8
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<ManifestFiles, DatagenError> {
    std::fs::create_dir_all(dir)?;
    let files = ManifestFiles::in_dir(dir);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        seed: manifest.config.seed,
        config: manifest.config.clone(),
        categories: manifest.categories.clone(),
    };
    let mut h = BufWriter::new(File::create(&files.header)?);
    serde_json::to_writer_pretty(&mut h, &header).map_err(std::io::Error::other)?;
    h.write_all(b"\n")?;
    h.flush()?;

    let mut w = BufWriter::new(File::create(&files.samples)?);
    for s in &manifest.samples {
        let rec = SampleRecord {
            sample_id: s.sample_id,
            event_id: s.event_id,
            category_id: s.true_category,
            features: encode_features(&s.features),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(files)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatagenError> {
    let files = ManifestFiles::in_dir(dir);
    let header: Header =
        serde_json::from_reader(BufReader::new(File::open(&files.header)?)).map_err(|e| DatagenError::Decode {
            line: e.line(),
            message: format!("{}: {e}", files.header.display()),
        })?;
    let dim = header.config.dim;
    let mut samples: Vec<Sample> = Vec::new();
    for (idx, line) in BufReader::new(File::open(&files.samples)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatagenError::Decode { line: idx + 1, message };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.sample_id != samples.len() as SampleId {
            return Err(bad(format!(
                "sample id {} out of order, expected {}",
                rec.sample_id,
                samples.len()
            )));
        }
        samples.push(Sample {
            sample_id: rec.sample_id,
            event_id: rec.event_id,
            features: decode_features(&rec.features, dim).map_err(bad)?,
            true_category: rec.category_id,
        });
    }
    let mut events: Vec<TriggerEvent> = Vec::new();
    for pair in samples.chunks(2) {
        let [a, b] = pair else {
            return Err(DatagenError::Decode {
                line: samples.len(),
                message: "odd sample count: every event holds two samples".into(),
            });
        };
        if a.event_id != b.event_id || a.true_category != b.true_category {
            return Err(DatagenError::Decode {
                line: b.sample_id as usize + 1,
                message: format!("samples {} and {} do not form an event", a.sample_id, b.sample_id),
            });
        }
        events.push(TriggerEvent {
            event_id: a.event_id,
            sample_ids: [a.sample_id, b.sample_id],
            category_id: a.true_category,
        });
    }
    Ok(DatasetManifest {
        config: header.config,
        categories: header.categories,
        events,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_longtail_dataset, NoveltyPartition};

    #[test]
    fn manifest_round_trips_bit_exact() {
        let cfg = GenConfig {
            n_categories: 4,
            abundances: Some(vec![60, 40, 30, 20]),
            partition: NoveltyPartition {
                group1: 2,
                group2_only: 1,
                left_out: 1,
            },
            ..GenConfig::default()
        };
        let m = generate_longtail_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&m, dir.path()).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
    }

    #[test]
    fn truncated_payload_reports_line() {
        let cfg = GenConfig {
            n_categories: 3,
            abundances: Some(vec![4, 2, 2]),
            partition: NoveltyPartition {
                group1: 1,
                group2_only: 1,
                left_out: 1,
            },
            ..GenConfig::default()
        };
        let m = generate_longtail_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_manifest(&m, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files.samples).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace("\"features\":\"", "\"features\":\"AAAA");
        std::fs::write(&files.samples, lines.join("\n")).unwrap();
        match read_manifest(dir.path()) {
            Err(DatagenError::Decode { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected decode error, got {other:?}"),
        }
    }
}
