use super::ModelError;
use crate::seed;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub embedding: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embedding: usize,
    /// Gate bias when the memory is switched on; 0 opens every gate half-way.
    pub gate_init_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embedding: 16,
            gate_init_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Feature,
    Classifier,
    Memory,
}

/// Trainable parameter blocks. Matrices map inputs to outputs (`x · W`), so `w1` is
/// `D×H`, `w2` is `H×E`, `wc` is `E×K` and `gate_w` is `E×E`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
}

impl Params {
    pub fn zeros(d: ModelDims) -> Self {
        Self {
            w1: Array2::zeros((d.input, d.hidden)),
            b1: Array1::zeros(d.hidden),
            w2: Array2::zeros((d.hidden, d.embedding)),
            b2: Array1::zeros(d.embedding),
            wc: Array2::zeros((d.embedding, d.classes)),
            bc: Array1::zeros(d.classes),
            gate_w: Array2::zeros((d.embedding, d.embedding)),
            gate_b: Array1::zeros(d.embedding),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.w1.nrows(),
            hidden: self.w1.ncols(),
            embedding: self.w2.ncols(),
            classes: self.wc.ncols(),
        }
    }

    /// Blocks in serialization order.
    pub fn blocks(&self) -> [(ParamGroup, &[f64]); 8] {
        use ParamGroup::*;
        fn s(a: Option<&[f64]>) -> &[f64] {
            a.expect("parameters use standard layout")
        }
        [
            (Feature, s(self.w1.as_slice())),
            (Feature, s(self.b1.as_slice())),
            (Feature, s(self.w2.as_slice())),
            (Feature, s(self.b2.as_slice())),
            (Classifier, s(self.wc.as_slice())),
            (Classifier, s(self.bc.as_slice())),
            (Memory, s(self.gate_w.as_slice())),
            (Memory, s(self.gate_b.as_slice())),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(ParamGroup, &mut [f64]); 8] {
        use ParamGroup::*;
        fn s(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("parameters use standard layout")
        }
        [
            (Feature, s(self.w1.as_slice_mut())),
            (Feature, s(self.b1.as_slice_mut())),
            (Feature, s(self.w2.as_slice_mut())),
            (Feature, s(self.b2.as_slice_mut())),
            (Classifier, s(self.wc.as_slice_mut())),
            (Classifier, s(self.bc.as_slice_mut())),
            (Memory, s(self.gate_w.as_slice_mut())),
            (Memory, s(self.gate_b.as_slice_mut())),
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat coordinate accessors, in block order.
    pub fn get(&self, mut idx: usize) -> f64 {
        for (_, b) in self.blocks() {
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut idx: usize, value: f64) {
        for (_, b) in self.blocks_mut() {
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn group_of(&self, mut idx: usize) -> ParamGroup {
        for (g, b) in self.blocks() {
            if idx < b.len() {
                return g;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub params: Params,
    /// `K×E` class centroids of direct embeddings.
    pub memory: Array2<f64>,
    pub oltr_enabled: bool,
    pub version: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Embedding fed to the head (memory-combined when the memory is on).
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
}

pub(crate) struct ForwardCache {
    pub x: Array2<f64>,
    pub hidden: Array2<f64>,
    pub direct: Array2<f64>,
    pub oltr: Option<OltrCache>,
    pub combined: Array2<f64>,
    pub logits: Array2<f64>,
}

pub(crate) struct OltrCache {
    pub attention: Array2<f64>,
    pub readout: Array2<f64>,
    pub gate: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max shift.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Single-vector memory readout, mirroring what `forward` does per row.
#[derive(Debug, Clone, PartialEq)]
pub struct OltrCombined {
    pub combined: Array1<f64>,
    pub attention: Array1<f64>,
    pub readout: Array1<f64>,
    pub gate: Array1<f64>,
}

/// `direct + g(direct) ⊙ Σ_k a_k m_k` with `a = softmax(M·direct / √E)` and
/// `g = sigmoid(direct · gate_w + gate_b)`.
pub fn oltr_combine(
    direct: ArrayView1<f64>,
    memory: ArrayView2<f64>,
    gate_w: ArrayView2<f64>,
    gate_b: ArrayView1<f64>,
) -> OltrCombined {
    let e = direct.len() as f64;
    let z = memory.dot(&direct) / e.sqrt();
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut attention = z.mapv(|v| (v - m).exp());
    let s = attention.sum();
    attention /= s;
    let readout = attention.dot(&memory);
    let gate = (direct.dot(&gate_w) + gate_b).mapv(sigmoid);
    let combined = &direct + &(&gate * &readout);
    OltrCombined {
        combined,
        attention,
        readout,
        gate,
    }
}

impl ClassifierModel {
    /// Random extractor and head, zero biases, closed memory.
    pub fn new(input: usize, classes: usize, cfg: &ModelConfig, seed_value: u64) -> Self {
        let dims = ModelDims {
            input,
            hidden: cfg.hidden,
            embedding: cfg.embedding,
            classes,
        };
        let mut rng = seed::stage_rng(seed_value, "model-init", 0);
        let mut normal = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let mut params = Params::zeros(dims);
        params.w1 = normal(input, cfg.hidden, (1.0 / input as f64).sqrt());
        params.w2 = normal(cfg.hidden, cfg.embedding, (1.0 / cfg.hidden as f64).sqrt());
        params.wc = normal(cfg.embedding, classes, (1.0 / cfg.embedding as f64).sqrt());
        params.gate_b.fill(cfg.gate_init_bias);
        Self {
            params,
            memory: Array2::zeros((classes, cfg.embedding)),
            oltr_enabled: false,
            version: 0,
            seed: seed_value,
        }
    }

    pub fn zeroed(dims: ModelDims) -> Self {
        Self {
            params: Params::zeros(dims),
            memory: Array2::zeros((dims.classes, dims.embedding)),
            oltr_enabled: false,
            version: 0,
            seed: 0,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.params.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.params.wc.ncols()
    }

    /// Grow the head to `classes` outputs. New head columns, biases and memory rows
    /// start at zero; existing ones are kept.
    pub fn expand_head(&mut self, classes: usize) {
        let old = self.num_classes();
        if classes <= old {
            return;
        }
        let e = self.dims().embedding;
        let mut wc = Array2::zeros((e, classes));
        wc.slice_mut(ndarray::s![.., ..old]).assign(&self.params.wc);
        let mut bc = Array1::zeros(classes);
        bc.slice_mut(ndarray::s![..old]).assign(&self.params.bc);
        let mut memory = Array2::zeros((classes, e));
        memory.slice_mut(ndarray::s![..old, ..]).assign(&self.memory);
        self.params.wc = wc;
        self.params.bc = bc;
        self.memory = memory;
    }

    /// Switch the memory path on with fresh gate parameters.
    pub fn enable_oltr(&mut self, gate_init_bias: f64) {
        if !self.oltr_enabled {
            self.params.gate_w.fill(0.0);
            self.params.gate_b.fill(gate_init_bias);
            self.oltr_enabled = true;
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), ModelError> {
        let d = self.dims().input;
        if x.ncols() != d {
            return Err(ModelError::Shape(format!(
                "features have {} columns, model expects {d}",
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardOutput, ModelError> {
        self.check_input(&x)?;
        let c = self.forward_cached(x);
        Ok(ForwardOutput {
            embeddings: c.combined,
            logits: c.logits,
        })
    }

    /// Direct embeddings, before the memory readout.
    pub fn embed_direct(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_input(&x)?;
        let p = &self.params;
        let h = (x.dot(&p.w1) + &p.b1).mapv(f64::tanh);
        Ok(h.dot(&p.w2) + &p.b2)
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> ForwardCache {
        let p = &self.params;
        let hidden = (x.dot(&p.w1) + &p.b1).mapv(f64::tanh);
        let direct = hidden.dot(&p.w2) + &p.b2;
        let (combined, oltr) = if self.oltr_enabled && self.memory.nrows() > 0 {
            let scale = (direct.ncols() as f64).sqrt();
            let attention = softmax_rows(&(direct.dot(&self.memory.t()) / scale));
            let readout = attention.dot(&self.memory);
            let gate = (direct.dot(&p.gate_w) + &p.gate_b).mapv(sigmoid);
            let combined = &direct + &(&gate * &readout);
            (
                combined,
                Some(OltrCache {
                    attention,
                    readout,
                    gate,
                }),
            )
        } else {
            (direct.clone(), None)
        };
        let logits = combined.dot(&p.wc) + &p.bc;
        ForwardCache {
            x: x.to_owned(),
            hidden,
            direct,
            oltr,
            combined,
            logits,
        }
    }

    /// Gradients of a loss given its gradient with respect to the logits.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Params {
        let p = &self.params;
        let mut g = p.zeros_like();
        g.wc = cache.combined.t().dot(dlogits);
        g.bc = dlogits.sum_axis(Axis(0));
        let dcombined = dlogits.dot(&p.wc.t());

        let mut ddirect = dcombined.clone();
        if let Some(o) = &cache.oltr {
            let dgate = &dcombined * &o.readout;
            let dreadout = &dcombined * &o.gate;
            let dpre_gate = &dgate * &o.gate.mapv(|s| s * (1.0 - s));
            g.gate_w = cache.direct.t().dot(&dpre_gate);
            g.gate_b = dpre_gate.sum_axis(Axis(0));
            ddirect = ddirect + dpre_gate.dot(&p.gate_w.t());

            // readout = a·M, a = softmax(z), z = direct·Mᵀ/√E; memory itself is not trained
            let da = dreadout.dot(&self.memory.t());
            let inner = (&da * &o.attention).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dz = &o.attention * &(&da - &inner);
            let scale = (cache.direct.ncols() as f64).sqrt();
            ddirect = ddirect + dz.dot(&self.memory) / scale;
        }

        g.w2 = cache.hidden.t().dot(&ddirect);
        g.b2 = ddirect.sum_axis(Axis(0));
        let dhidden = ddirect.dot(&p.w2.t());
        let dpre = &dhidden * &cache.hidden.mapv(|h| 1.0 - h * h);
        g.w1 = cache.x.t().dot(&dpre);
        g.b1 = dpre.sum_axis(Axis(0));
        g
    }
}
