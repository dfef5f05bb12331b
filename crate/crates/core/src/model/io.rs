//! Versioned binary snapshot.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! 0   8   magic "LOOPIDM\0"
//! 8   4   format version (u32, currently 1)
//! 12  16  D, H, E, K (u32 each)
//! 28  4   flags (u32; bit 0 = memory path enabled)
//! 32  8   model version (u64)
//! 40  8   seed (u64)
//! 48  ..  f64 blocks: w1 (D×H), b1 (H), w2 (H×E), b2 (E), wc (E×K), bc (K),
//!         gate_w (E×E), gate_b (E), memory (K×E); matrices row-major
//! ```

use super::network::{ClassifierModel, ModelDims, Params};
use super::ModelError;
use ndarray::{Array1, Array2};
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 8] = b"LOOPIDM\0";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 48;

pub fn encode_model(m: &ClassifierModel) -> Vec<u8> {
    let d = m.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (m.params.len() + m.memory.len()));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [d.input, d.hidden, d.embedding, d.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&u32::from(m.oltr_enabled).to_le_bytes());
    out.extend_from_slice(&m.version.to_le_bytes());
    out.extend_from_slice(&m.seed.to_le_bytes());
    for (_, block) in m.params.blocks() {
        block.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    m.memory.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Decode {
                offset: self.pos,
                message: format!(
                    "truncated reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>, ModelError> {
        let start = self.pos;
        let raw = self.take(n * 8, what)?;
        let v: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(ModelError::Decode {
                offset: start + 8 * i,
                message: format!("non-finite value in {what}"),
            });
        }
        Ok(v)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ClassifierModel, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MODEL_MAGIC {
        return Err(ModelError::Decode {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let fv = r.u32("format version")?;
    if fv != FORMAT_VERSION {
        return Err(ModelError::Decode {
            offset: 8,
            message: format!("unsupported format version {fv}"),
        });
    }
    let mut dim = |what| r.u32(what).map(|v| v as usize);
    let dims = ModelDims {
        input: dim("D")?,
        hidden: dim("H")?,
        embedding: dim("E")?,
        classes: dim("K")?,
    };
    let flags = r.u32("flags")?;
    let version = r.u64("version")?;
    let seed = r.u64("seed")?;
    let ModelDims {
        input: d,
        hidden: h,
        embedding: e,
        classes: k,
    } = dims;
    let mat = |r: &mut Reader, rows, cols, what| -> Result<Array2<f64>, ModelError> {
        Ok(Array2::from_shape_vec((rows, cols), r.floats(rows * cols, what)?).expect("sized"))
    };
    let vec = |r: &mut Reader, n, what| -> Result<Array1<f64>, ModelError> { Ok(Array1::from(r.floats(n, what)?)) };
    let params = Params {
        w1: mat(&mut r, d, h, "w1")?,
        b1: vec(&mut r, h, "b1")?,
        w2: mat(&mut r, h, e, "w2")?,
        b2: vec(&mut r, e, "b2")?,
        wc: mat(&mut r, e, k, "wc")?,
        bc: vec(&mut r, k, "bc")?,
        gate_w: mat(&mut r, e, e, "gate_w")?,
        gate_b: vec(&mut r, e, "gate_b")?,
    };
    let memory = mat(&mut r, k, e, "memory")?;
    if r.pos != bytes.len() {
        return Err(ModelError::Decode {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(ClassifierModel {
        params,
        memory,
        oltr_enabled: flags & 1 == 1,
        version,
        seed,
    })
}

pub fn write_model(m: &ClassifierModel, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode_model(m))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ClassifierModel, ModelError> {
    decode_model(&std::fs::read(path)?)
}
