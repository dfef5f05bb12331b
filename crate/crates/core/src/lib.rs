//! Iterative human-and-machine species identification on synthetic long-tailed data.
//!
//! A classifier is trained on an initial collection, scores every new batch with a
//! free-energy confidence, routes low-confidence predictions to annotators and keeps
//! high-confidence ones as pseudo-labels, then updates itself from the mix. The loop
//! repeats once per collection period.
//!
//! Module map:
//!
//! - [`datagen`]: seeded long-tailed datasets with paired trigger events, event-based splits.
//! - [`model`]: small MLP with class-centroid memory, hand-written backprop, SGD.
//! - [`energy`]: free-energy scores, margin loss, energy fine-tuning, threshold calibration.
//! - [`metrics`]: class-average accuracy, high-confidence stats, novelty ratio, label efficiency.
//! - [`annotation`]: journaled task queue with leases, oracle annotator, spot checks.
//! - [`pipeline`]: period orchestration, checkpoints and provenance.
//! - [`config`]: the experiment configuration binding everything together.

pub mod annotation;
pub mod config;
pub mod datagen;
pub mod energy;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod records;
pub mod seed;

/// Global category index in the synthetic species universe.
pub type CategoryId = u32;
/// Sample identifier, dense from zero within a manifest.
pub type SampleId = u64;

/// Version stamped into every JSON artifact this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
