use loopid_core::annotation::{SharedQueue, SpotCheckBatch};
use loopid_core::pipeline::{Annotator, PeriodContext, PipelineError};
use loopid_core::{CategoryId, SampleId};
use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Where the orchestrator is, as seen by API clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// No period is waiting for labels (between periods, or nothing running).
    Idle,
    /// A period's low-confidence tasks are open for labelling.
    Annotating,
    /// The queue drained and the model update is running.
    Updating,
    /// The annotation window closed with tasks outstanding.
    TimedOut,
    Finished,
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryEntry {
    pub id: CategoryId,
    pub name: String,
    /// The model could already predict this category when the period started.
    pub known: bool,
}

/// One period's annotation window.
pub(crate) struct Session {
    pub period: u32,
    pub spot_check: Option<Arc<Mutex<SpotCheckBatch>>>,
    pub categories: Vec<CategoryEntry>,
    pub projections: BTreeMap<SampleId, [f64; 2]>,
    pub tau: f64,
    pub temperature: f64,
    pub deadline: Instant,
}

pub(crate) struct HubState {
    pub phase: Phase,
    pub period: Option<u32>,
    /// Kept after the session closes so late retries of applied labels stay idempotent.
    pub queue: Option<SharedQueue>,
    pub session: Option<Session>,
    pub advance: Option<u32>,
}

/// State shared between the HTTP handlers and the orchestrator thread.
pub struct Hub {
    pub(crate) state: Mutex<HubState>,
    pub(crate) changed: Condvar,
    pub(crate) out: Option<PathBuf>,
    pub(crate) token: Option<String>,
}

impl Hub {
    /// `out` is the run directory reports are served from.
    pub fn new(out: Option<PathBuf>, token: Option<String>) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(HubState {
                phase: Phase::Idle,
                period: None,
                queue: None,
                session: None,
                advance: None,
            }),
            changed: Condvar::new(),
            out,
            token,
        })
    }

    pub fn phase(&self) -> Phase {
        self.state.lock().phase
    }

    pub fn set_phase(&self, phase: Phase) {
        let mut s = self.state.lock();
        s.phase = phase;
        if phase != Phase::Annotating {
            s.session = None;
        }
        self.changed.notify_all();
    }

    /// Blocks until the hub leaves `phase` or `timeout` passes; returns the phase then.
    pub fn wait_while(&self, phase: Phase, timeout: Duration) -> Phase {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock();
        while s.phase == phase {
            if self.changed.wait_until(&mut s, deadline).timed_out() {
                break;
            }
        }
        s.phase
    }
}

/// Serves the queue over HTTP and waits for a client to advance the period.
pub struct HumanAnnotator {
    hub: Arc<Hub>,
    palette: Vec<CategoryId>,
    timeout: Duration,
}

impl HumanAnnotator {
    /// `palette` is the set of categories annotators may assign.
    pub fn new(hub: Arc<Hub>, palette: Vec<CategoryId>, timeout: Duration) -> Self {
        Self { hub, palette, timeout }
    }
}

impl Annotator for HumanAnnotator {
    fn annotate(&mut self, ctx: &PeriodContext<'_>) -> Result<(), PipelineError> {
        let p = ctx.period;
        if ctx.queue.lock().is_drained(p) {
            // nothing to label, e.g. the queue was drained offline before a resume
            let mut s = self.hub.state.lock();
            s.phase = Phase::Updating;
            s.period = Some(p);
            s.queue = Some(ctx.queue.clone());
            s.advance = Some(p);
            self.hub.changed.notify_all();
            return Ok(());
        }
        let mut projections = BTreeMap::new();
        let spot: Vec<SampleId> = ctx
            .spot_check
            .as_ref()
            .map(|b| b.lock().sample_ids.clone())
            .unwrap_or_default();
        {
            let q = ctx.queue.lock();
            let samples = q
                .tasks()
                .iter()
                .filter(|t| t.period == p)
                .map(|t| t.sample_id)
                .chain(spot);
            for s in samples {
                projections.insert(s, ctx.projection.project(&ctx.manifest.sample(s).features));
            }
        }
        let categories = self
            .palette
            .iter()
            .map(|&id| CategoryEntry {
                id,
                name: ctx.manifest.category(id).name.clone(),
                known: ctx.known.contains(&id),
            })
            .collect();
        let deadline = Instant::now() + self.timeout;
        let mut s = self.hub.state.lock();
        s.phase = Phase::Annotating;
        s.period = Some(p);
        s.queue = Some(ctx.queue.clone());
        s.advance = None;
        s.session = Some(Session {
            period: p,
            spot_check: ctx.spot_check.clone(),
            categories,
            projections,
            tau: ctx.tau,
            temperature: ctx.temperature,
            deadline,
        });
        self.hub.changed.notify_all();
        tracing::info!(period = p, "waiting for annotations");
        while s.advance != Some(p) {
            if self.hub.changed.wait_until(&mut s, deadline).timed_out() && s.advance != Some(p) {
                s.phase = Phase::TimedOut;
                s.session = None;
                self.hub.changed.notify_all();
                tracing::warn!(period = p, "annotation window closed");
                // the pipeline sees the undrained queue and checkpoints
                return Ok(());
            }
        }
        s.phase = Phase::Updating;
        s.session = None;
        self.hub.changed.notify_all();
        Ok(())
    }
}
