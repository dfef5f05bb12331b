use crate::Format;
use anyhow::{bail, Context};
use loopid_core::metrics::{render_csv, render_json, render_text, EvaluationReport};
use loopid_core::pipeline::{period_dir, REPORT_FILE};
use std::path::{Path, PathBuf};

/// Accepts a report file, a period directory, or a run directory.
fn locate(path: &Path, period: Option<u32>) -> anyhow::Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.join(REPORT_FILE).is_file() {
        return Ok(path.join(REPORT_FILE));
    }
    let at = |p| period_dir(path, p).join(REPORT_FILE);
    let p = match period {
        Some(p) => p,
        None => (1..).take_while(|&p| at(p).is_file()).last().unwrap_or(1),
    };
    let file = at(p);
    if !file.is_file() {
        bail!("no report at {}", file.display());
    }
    Ok(file)
}

/// Byte offset of a 1-based (line, column) position.
fn offset_of(bytes: &[u8], line: usize, column: usize) -> usize {
    let start: usize = bytes
        .split_inclusive(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(<[u8]>::len)
        .sum();
    (start + column.saturating_sub(1)).min(bytes.len())
}

pub fn decode(file: &Path) -> anyhow::Result<EvaluationReport> {
    let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        anyhow::anyhow!(
            "{}: corrupt report at line {}, column {} (byte offset {}): {e}",
            file.display(),
            e.line(),
            e.column(),
            offset_of(&bytes, e.line(), e.column())
        )
    })
}

pub fn report(path: &Path, period: Option<u32>, format: Format) -> anyhow::Result<()> {
    let r = decode(&locate(path, period)?)?;
    let text = match format {
        Format::Text => render_text(&r),
        Format::Csv => render_csv(&r),
        Format::Json => render_json(&r),
    };
    print!("{text}");
    Ok(())
}
