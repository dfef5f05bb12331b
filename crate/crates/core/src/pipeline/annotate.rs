use super::{AtPeriod, PipelineError};
use crate::annotation::{oracle_verdicts, FeatureProjection, OracleAnnotator, SharedQueue, SpotCheckBatch};
use crate::datagen::DatasetManifest;
use crate::CategoryId;
use parking_lot::Mutex;
use std::sync::Arc;

/// Everything an annotator may need while a period waits for labels.
pub struct PeriodContext<'a> {
    pub period: u32,
    pub queue: SharedQueue,
    pub spot_check: Option<Arc<Mutex<SpotCheckBatch>>>,
    pub manifest: &'a DatasetManifest,
    /// Categories the model could predict when the period started, in head order.
    pub known: &'a [CategoryId],
    pub projection: &'a FeatureProjection,
    pub tau: f64,
    pub temperature: f64,
}

/// Resolves the low-confidence tasks (and any spot check) of one period. Returning
/// `Ok` means the period may proceed with whatever labels the queue holds.
pub trait Annotator {
    fn annotate(&mut self, ctx: &PeriodContext<'_>) -> Result<(), PipelineError>;
}

/// Drains the queue with a simulated annotator and answers spot checks from truth.
pub struct OracleDriver {
    pub oracle: OracleAnnotator,
}

impl OracleDriver {
    pub fn new(error_rate: f64, palette: Vec<CategoryId>, seed: u64) -> Result<Self, PipelineError> {
        Ok(Self {
            oracle: OracleAnnotator::new(error_rate, palette, seed).at(0)?,
        })
    }
}

impl Annotator for OracleDriver {
    fn annotate(&mut self, ctx: &PeriodContext<'_>) -> Result<(), PipelineError> {
        let truth = |s| ctx.manifest.sample(s).true_category;
        self.oracle
            .drain(&mut ctx.queue.lock(), ctx.period, truth)
            .at(ctx.period)?;
        if let Some(batch) = &ctx.spot_check {
            oracle_verdicts(&mut batch.lock(), truth);
        }
        Ok(())
    }
}

/// Provides no labels: every outstanding task is withdrawn. Used for the pseudo-label
/// only ablation.
pub struct NoAnnotation;

impl Annotator for NoAnnotation {
    fn annotate(&mut self, ctx: &PeriodContext<'_>) -> Result<(), PipelineError> {
        ctx.queue.lock().expire_outstanding(ctx.period).at(ctx.period)?;
        Ok(())
    }
}
