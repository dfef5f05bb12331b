use super::journal::{Durability, Journal, JournalEntry};
use super::AnnotationError;
use crate::records::PredictionRecord;
use crate::{CategoryId, SampleId};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub type TaskId = u64;

pub const DEFAULT_LEASE_MS: u64 = 10 * 60 * 1000;

pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now_ms(&self) -> u64;
}

/// Wall-clock milliseconds since the Unix epoch.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

/// A manually advanced clock, so oracle runs produce identical journals.
#[derive(Debug, Default)]
pub struct LogicalClock(AtomicU64);

impl LogicalClock {
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Claimed,
    Labeled,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: TaskId,
    pub sample_id: SampleId,
    pub period: u32,
    /// Where the feature vector lives, e.g. `samples.jsonl#<sample_id>`.
    pub payload_ref: String,
    pub model_prediction: CategoryId,
    pub energy: f64,
    pub status: TaskStatus,
    pub assigned_label: Option<CategoryId>,
    pub annotator_id: Option<String>,
    pub created_ms: u64,
    pub claimed_ms: Option<u64>,
    pub lease_until_ms: Option<u64>,
    pub labeled_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueueCounts {
    pub pending: usize,
    pub claimed: usize,
    pub labeled: usize,
    pub expired: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOutcome {
    Applied,
    /// The same label was already recorded; nothing changed.
    AlreadyApplied,
}

pub type SharedQueue = Arc<Mutex<AnnotationQueue>>;

/// The queue of low-confidence tasks. Every mutation goes through `&mut self`, and is
/// journalled before it is applied when a journal is attached.
#[derive(Debug)]
pub struct AnnotationQueue {
    tasks: Vec<AnnotationTask>,
    by_sample: BTreeMap<SampleId, TaskId>,
    journal: Option<Journal>,
    lease_ms: u64,
    clock: Arc<dyn Clock>,
}

impl AnnotationQueue {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            tasks: vec![],
            by_sample: BTreeMap::new(),
            journal: None,
            lease_ms: DEFAULT_LEASE_MS,
            clock,
        }
    }

    /// Opens a journalled queue, replaying any existing entries.
    pub fn open(path: &Path, durability: Durability, clock: Arc<dyn Clock>) -> Result<Self, AnnotationError> {
        let (journal, entries) = Journal::open(path, durability)?;
        let mut q = Self::in_memory(clock);
        for (i, e) in entries.into_iter().enumerate() {
            q.replay(e).map_err(|e| AnnotationError::Journal {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        q.journal = Some(journal);
        Ok(q)
    }

    pub fn with_lease_ms(mut self, lease_ms: u64) -> Self {
        self.lease_ms = lease_ms;
        self
    }

    pub fn into_shared(self) -> SharedQueue {
        Arc::new(Mutex::new(self))
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal.as_ref().map(|j| j.path())
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn replay(&mut self, e: JournalEntry) -> Result<(), AnnotationError> {
        match e {
            JournalEntry::Enqueued { task } => {
                if task.task_id != self.tasks.len() as TaskId {
                    return Err(AnnotationError::Config(format!(
                        "task id {} out of sequence",
                        task.task_id
                    )));
                }
                self.by_sample.insert(task.sample_id, task.task_id);
                self.tasks.push(task);
            }
            JournalEntry::Claimed {
                task_id,
                annotator,
                at_ms,
                lease_until_ms,
            } => {
                let t = self.task_mut(task_id)?;
                t.status = TaskStatus::Claimed;
                t.annotator_id = Some(annotator);
                t.claimed_ms = Some(at_ms);
                t.lease_until_ms = Some(lease_until_ms);
            }
            JournalEntry::Released { task_id, .. } => {
                let t = self.task_mut(task_id)?;
                t.status = TaskStatus::Pending;
                t.annotator_id = None;
                t.lease_until_ms = None;
            }
            JournalEntry::Labeled {
                task_id,
                label,
                annotator,
                at_ms,
            } => {
                let t = self.task_mut(task_id)?;
                t.status = TaskStatus::Labeled;
                t.assigned_label = Some(label);
                if annotator.is_some() {
                    t.annotator_id = annotator;
                }
                t.labeled_ms = Some(at_ms);
                t.lease_until_ms = None;
            }
            JournalEntry::Expired { task_id, .. } => {
                let t = self.task_mut(task_id)?;
                t.status = TaskStatus::Expired;
                t.lease_until_ms = None;
            }
        }
        Ok(())
    }

    fn commit(&mut self, entries: Vec<JournalEntry>) -> Result<(), AnnotationError> {
        if let Some(j) = self.journal.as_mut() {
            j.append(&entries)?;
        }
        for e in entries {
            self.replay(e)?;
        }
        Ok(())
    }

    fn task_mut(&mut self, id: TaskId) -> Result<&mut AnnotationTask, AnnotationError> {
        self.tasks.get_mut(id as usize).ok_or(AnnotationError::UnknownTask(id))
    }

    pub fn task(&self, id: TaskId) -> Result<&AnnotationTask, AnnotationError> {
        self.tasks.get(id as usize).ok_or(AnnotationError::UnknownTask(id))
    }

    pub fn task_for_sample(&self, sample: SampleId) -> Option<&AnnotationTask> {
        self.by_sample.get(&sample).map(|&id| &self.tasks[id as usize])
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    /// One pending task per record; records already queued return their existing task.
    /// Nothing is enqueued if any record is confident.
    pub fn enqueue_low_confidence(
        &mut self,
        period: u32,
        records: &[PredictionRecord],
    ) -> Result<Vec<TaskId>, AnnotationError> {
        if let Some(r) = records.iter().find(|r| r.confident) {
            return Err(AnnotationError::ConfidentRecord(r.sample_id));
        }
        let now = self.clock.now_ms();
        let mut ids = Vec::with_capacity(records.len());
        let mut entries = vec![];
        let mut fresh: BTreeMap<SampleId, TaskId> = BTreeMap::new();
        for r in records {
            if let Some(&id) = self.by_sample.get(&r.sample_id).or(fresh.get(&r.sample_id)) {
                ids.push(id);
                continue;
            }
            let task_id = (self.tasks.len() + entries.len()) as TaskId;
            fresh.insert(r.sample_id, task_id);
            ids.push(task_id);
            entries.push(JournalEntry::Enqueued {
                task: AnnotationTask {
                    task_id,
                    sample_id: r.sample_id,
                    period,
                    payload_ref: format!("samples.jsonl#{}", r.sample_id),
                    model_prediction: r.predicted_category,
                    energy: r.energy,
                    status: TaskStatus::Pending,
                    assigned_label: None,
                    annotator_id: None,
                    created_ms: now,
                    claimed_ms: None,
                    lease_until_ms: None,
                    labeled_ms: None,
                },
            });
        }
        self.commit(entries)?;
        Ok(ids)
    }

    /// Returns claimed tasks whose lease has run out to pending.
    pub fn expire_leases(&mut self) -> Result<usize, AnnotationError> {
        let now = self.clock.now_ms();
        let entries: Vec<_> = self
            .tasks
            .iter()
            .filter(|t| t.status == TaskStatus::Claimed && t.lease_until_ms.is_some_and(|u| u <= now))
            .map(|t| JournalEntry::Released {
                task_id: t.task_id,
                at_ms: now,
            })
            .collect();
        let n = entries.len();
        self.commit(entries)?;
        Ok(n)
    }

    /// Claims up to `limit` pending tasks, lowest task id first.
    pub fn claim(&mut self, annotator: &str, limit: usize) -> Result<Vec<AnnotationTask>, AnnotationError> {
        self.expire_leases()?;
        let now = self.clock.now_ms();
        let lease_until_ms = now.saturating_add(self.lease_ms);
        let ids: Vec<TaskId> = self
            .tasks
            .iter()
            .filter(|t| t.status == TaskStatus::Pending)
            .take(limit)
            .map(|t| t.task_id)
            .collect();
        let entries = ids
            .iter()
            .map(|&task_id| JournalEntry::Claimed {
                task_id,
                annotator: annotator.to_string(),
                at_ms: now,
                lease_until_ms,
            })
            .collect();
        self.commit(entries)?;
        Ok(ids.iter().map(|&id| self.tasks[id as usize].clone()).collect())
    }

    /// Records a label. Re-applying the same label is a no-op; a different label on a
    /// labeled task is refused. A live claim by another annotator blocks the label.
    pub fn apply_label(
        &mut self,
        task_id: TaskId,
        label: CategoryId,
        annotator: Option<&str>,
    ) -> Result<LabelOutcome, AnnotationError> {
        let now = self.clock.now_ms();
        let t = self.task(task_id)?;
        match t.status {
            TaskStatus::Labeled => {
                let existing = t.assigned_label.expect("labeled task has a label");
                return if existing == label {
                    Ok(LabelOutcome::AlreadyApplied)
                } else {
                    Err(AnnotationError::Immutable {
                        task_id,
                        existing,
                        requested: label,
                    })
                };
            }
            TaskStatus::Expired => return Err(AnnotationError::Expired { task_id }),
            TaskStatus::Claimed => {
                let until = t.lease_until_ms.unwrap_or(0);
                let holder = t.annotator_id.clone().unwrap_or_default();
                if let Some(a) = annotator {
                    if a != holder && until > now {
                        return Err(AnnotationError::Claimed {
                            task_id,
                            holder,
                            until_ms: until,
                        });
                    }
                }
            }
            TaskStatus::Pending => {}
        }
        self.commit(vec![JournalEntry::Labeled {
            task_id,
            label,
            annotator: annotator.map(str::to_string),
            at_ms: now,
        }])?;
        Ok(LabelOutcome::Applied)
    }

    /// Withdraws every unlabeled task of `period`.
    pub fn expire_outstanding(&mut self, period: u32) -> Result<usize, AnnotationError> {
        let now = self.clock.now_ms();
        let entries: Vec<_> = self
            .tasks
            .iter()
            .filter(|t| t.period == period && matches!(t.status, TaskStatus::Pending | TaskStatus::Claimed))
            .map(|t| JournalEntry::Expired {
                task_id: t.task_id,
                at_ms: now,
            })
            .collect();
        let n = entries.len();
        self.commit(entries)?;
        Ok(n)
    }

    pub fn counts(&self) -> QueueCounts {
        self.counts_where(|_| true)
    }

    pub fn counts_for_period(&self, period: u32) -> QueueCounts {
        self.counts_where(|t| t.period == period)
    }

    fn counts_where(&self, f: impl Fn(&AnnotationTask) -> bool) -> QueueCounts {
        let mut c = QueueCounts::default();
        for t in self.tasks.iter().filter(|t| f(t)) {
            c.total += 1;
            match t.status {
                TaskStatus::Pending => c.pending += 1,
                TaskStatus::Claimed => c.claimed += 1,
                TaskStatus::Labeled => c.labeled += 1,
                TaskStatus::Expired => c.expired += 1,
            }
        }
        c
    }

    /// True when no task of `period` is waiting for a label.
    pub fn is_drained(&self, period: u32) -> bool {
        let c = self.counts_for_period(period);
        c.pending == 0 && c.claimed == 0
    }

    pub fn labels_for_period(&self, period: u32) -> BTreeMap<SampleId, CategoryId> {
        self.tasks
            .iter()
            .filter(|t| t.period == period && t.status == TaskStatus::Labeled)
            .map(|t| (t.sample_id, t.assigned_label.expect("labeled")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::LabelSource;

    pub(crate) fn low(sample_id: SampleId) -> PredictionRecord {
        PredictionRecord {
            sample_id,
            predicted_category: 1,
            logits_digest: String::new(),
            energy: -1.0,
            softmax_max: 0.4,
            confident: false,
            label_source: LabelSource::None,
            final_label: None,
        }
    }

    fn queue() -> (AnnotationQueue, Arc<LogicalClock>) {
        let clock = Arc::new(LogicalClock::default());
        (AnnotationQueue::in_memory(clock.clone()), clock)
    }

    #[test]
    fn enqueue_is_idempotent() {
        let (mut q, _) = queue();
        let recs = [low(5), low(6), low(7)];
        let a = q.enqueue_low_confidence(2, &recs).unwrap();
        let b = q.enqueue_low_confidence(2, &recs).unwrap();
        assert_eq!(a, b);
        assert_eq!(q.counts().pending, 3);
        assert_eq!(q.counts().total, 3);
    }

    #[test]
    fn confident_record_is_rejected() {
        let (mut q, _) = queue();
        let mut c = low(9);
        c.confident = true;
        match q.enqueue_low_confidence(2, &[low(1), c]) {
            Err(AnnotationError::ConfidentRecord(9)) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(q.counts().total, 0);
    }

    #[test]
    fn lease_expiry_returns_task() {
        let (mut q, clock) = queue();
        q.enqueue_low_confidence(2, &[low(1), low(2)]).unwrap();
        let got = q.claim("ann", 1).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(q.counts().claimed, 1);
        clock.advance(DEFAULT_LEASE_MS + 1);
        q.expire_leases().unwrap();
        assert_eq!(q.counts().pending, 2);
    }

    #[test]
    fn labels_are_immutable_and_idempotent() {
        let (mut q, _) = queue();
        q.enqueue_low_confidence(2, &[low(1)]).unwrap();
        assert_eq!(q.apply_label(0, 4, None).unwrap(), LabelOutcome::Applied);
        let before = q.tasks().to_vec();
        assert_eq!(q.apply_label(0, 4, None).unwrap(), LabelOutcome::AlreadyApplied);
        assert_eq!(q.tasks(), &before[..]);
        assert!(matches!(
            q.apply_label(0, 5, None),
            Err(AnnotationError::Immutable { .. })
        ));
        assert!(q.is_drained(2));
        assert_eq!(q.labels_for_period(2), BTreeMap::from([(1, 4)]));
    }

    #[test]
    fn live_claim_blocks_other_annotator() {
        let (mut q, clock) = queue();
        q.enqueue_low_confidence(2, &[low(1)]).unwrap();
        q.claim("alice", 5).unwrap();
        assert!(matches!(
            q.apply_label(0, 3, Some("bob")),
            Err(AnnotationError::Claimed { .. })
        ));
        clock.advance(DEFAULT_LEASE_MS);
        assert_eq!(q.apply_label(0, 3, Some("bob")).unwrap(), LabelOutcome::Applied);
    }

    #[test]
    fn journal_replays_and_ignores_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queue.jsonl");
        let clock: Arc<dyn Clock> = Arc::new(LogicalClock::default());
        {
            let mut q = AnnotationQueue::open(&path, Durability::Sync, clock.clone()).unwrap();
            q.enqueue_low_confidence(2, &[low(1), low(2), low(3)]).unwrap();
            q.claim("a", 2).unwrap();
            q.apply_label(0, 7, Some("a")).unwrap();
        }
        let snapshot = AnnotationQueue::open(&path, Durability::Sync, clock.clone())
            .unwrap()
            .tasks()
            .to_vec();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        use std::fs::OpenOptions;
        use std::io::Write;
        f.write_all(br#"{"op":"labeled","task_id":1,"la"#).unwrap();
        drop(f);
        let mut q = AnnotationQueue::open(&path, Durability::Sync, clock).unwrap();
        assert_eq!(q.tasks(), &snapshot[..]);
        assert_eq!(q.counts().labeled, 1);
        q.apply_label(1, 2, Some("a")).unwrap();
        assert_eq!(q.counts().labeled, 2);
    }

    #[test]
    fn corrupt_middle_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queue.jsonl");
        let clock: Arc<dyn Clock> = Arc::new(LogicalClock::default());
        {
            let mut q = AnnotationQueue::open(&path, Durability::Flush, clock.clone()).unwrap();
            q.enqueue_low_confidence(2, &[low(1), low(2), low(3)]).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "{not json";
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        match AnnotationQueue::open(&path, Durability::Flush, clock) {
            Err(AnnotationError::Journal { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
