//! The trainable classifier: a two-layer feature extractor, a class-centroid memory
//! gated into the embedding, and a linear head, with hand-written gradients.

mod io;
mod loss;
mod network;
mod train;

pub use io::{decode_model, encode_model, read_model, write_model, MODEL_MAGIC};
pub use loss::{loss_and_gradients, loss_and_logit_grad, EnergyTerm, LossBreakdown, LossSpec};
pub use network::{
    oltr_combine, softmax_rows, ClassifierModel, ForwardOutput, ModelConfig, ModelDims, OltrCombined, ParamGroup,
    Params,
};
pub use train::{
    batches_from, class_average_on, compute_centroids, compute_centroids_lenient, fit, predict, train_supervised,
    Batch, EpochRecord, GroupRates, LabeledSet, Sgd, Target, TrainConfig, TrainOutcome,
};

use crate::CategoryId;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {class} (category {category:?}) has no training samples for its centroid")]
    EmptyCentroid { class: usize, category: Option<CategoryId> },
    #[error(
        "non-finite loss {loss} at epoch {epoch}, batch {batch} (lr feature {lr_feature}, classifier {lr_classifier})"
    )]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        lr_feature: f64,
        lr_classifier: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model decode at byte {offset}: {message}")]
    Decode { offset: usize, message: String },
}
