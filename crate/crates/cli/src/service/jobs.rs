//! Job records held by the service and the worker that runs them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use clipdrag::image_io::Image;
use clipdrag::pipeline::{run_edit, EditObserver, JobSpec, RunStatus, Stage, TrajectoryRecord};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::bundle::{self, BundleWriter, ResultSummary};

pub const ENVELOPE_FILE: &str = "envelope.json";
pub const INPUT_IMAGE: &str = "input.png";
pub const INPUT_MASK: &str = "mask.png";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Finetuning,
    Inverting,
    Optimizing,
    Denoising,
    Done,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Cancelled)
    }

    fn rank(self) -> usize {
        match self {
            Self::Queued => 0,
            Self::Finetuning => 1,
            Self::Inverting => 2,
            Self::Optimizing => 3,
            Self::Denoising => 4,
            Self::Done | Self::Failed | Self::Cancelled => 5,
        }
    }

    /// Forward moves along queued, finetuning, inverting, optimizing,
    /// denoising, done; failed and cancelled from any non-terminal state.
    /// Stages may be skipped but never revisited.
    pub fn can_advance_to(self, next: Self) -> bool {
        if self.is_terminal() {
            return false;
        }
        match next {
            Self::Failed | Self::Cancelled => true,
            _ => next.rank() > self.rank(),
        }
    }
}

impl From<Stage> for JobStatus {
    fn from(stage: Stage) -> Self {
        match stage {
            Stage::Finetuning => Self::Finetuning,
            Stage::Inverting => Self::Inverting,
            Stage::Optimizing => Self::Optimizing,
            Stage::Denoising => Self::Denoising,
        }
    }
}

impl From<RunStatus> for JobStatus {
    fn from(status: RunStatus) -> Self {
        match status {
            RunStatus::Done => Self::Done,
            RunStatus::Failed => Self::Failed,
            RunStatus::Cancelled => Self::Cancelled,
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Status snapshot of one job. Timestamps are Unix milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEnvelope {
    pub job_id: String,
    pub spec: JobSpec,
    pub status: JobStatus,
    /// Last completed optimization iteration.
    pub progress: usize,
    pub max_iterations: usize,
    pub created_at: u64,
    pub updated_at: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Iterations with a preview image.
    pub previews: Vec<usize>,
    pub has_mask: bool,
}

impl JobEnvelope {
    pub fn new(job_id: String, spec: JobSpec, has_mask: bool) -> Self {
        let now = now_ms();
        Self {
            job_id,
            max_iterations: spec.hyperparams.max_iterations,
            spec,
            status: JobStatus::Queued,
            progress: 0,
            created_at: now,
            updated_at: now,
            started_at: None,
            finished_at: None,
            error: None,
            previews: Vec::new(),
            has_mask,
        }
    }

    /// Applies a transition if the status machine allows it.
    pub fn advance(&mut self, next: JobStatus) -> bool {
        if !self.status.can_advance_to(next) {
            return false;
        }
        let now = now_ms();
        if self.status == JobStatus::Queued && !next.is_terminal() {
            self.started_at = Some(now);
        }
        if next.is_terminal() {
            self.finished_at = Some(now);
        }
        self.status = next;
        self.updated_at = now;
        true
    }

    pub fn record_progress(&mut self, iteration: usize) {
        self.progress = self.progress.max(iteration);
        self.updated_at = now_ms();
    }
}

/// A job known to the service. Readers take short locks on snapshots; the
/// worker only holds a lock while publishing one update.
pub struct JobHandle {
    pub id: String,
    pub dir: PathBuf,
    envelope: Mutex<JobEnvelope>,
    trajectory: RwLock<Vec<TrajectoryRecord>>,
    summary: Mutex<Option<ResultSummary>>,
    cancel: AtomicBool,
}

impl JobHandle {
    pub fn new(dir: PathBuf, envelope: JobEnvelope) -> Self {
        Self {
            id: envelope.job_id.clone(),
            dir,
            envelope: Mutex::new(envelope),
            trajectory: RwLock::new(Vec::new()),
            summary: Mutex::new(None),
            cancel: AtomicBool::new(false),
        }
    }

    /// Rebuilds a handle from a job directory written by an earlier service.
    /// Jobs that were still running are marked failed.
    pub fn restore(dir: &Path) -> clipdrag::Result<Self> {
        let mut envelope: JobEnvelope = serde_json::from_slice(&std::fs::read(dir.join(ENVELOPE_FILE))?)?;
        let summary = bundle::read_summary(dir)?;
        if !envelope.status.is_terminal() {
            envelope.advance(JobStatus::Failed);
            envelope.error = Some("interrupted by a service restart".into());
        }
        envelope.previews = bundle::list_previews(dir);
        let handle = Self::new(dir.to_path_buf(), envelope);
        *handle.trajectory.write().expect("trajectory lock") = bundle::read_trajectory(dir)?;
        *handle.summary.lock().expect("summary lock") = summary;
        handle.persist();
        Ok(handle)
    }

    pub fn envelope(&self) -> JobEnvelope {
        self.envelope.lock().expect("envelope lock").clone()
    }

    pub fn status(&self) -> JobStatus {
        self.envelope.lock().expect("envelope lock").status
    }

    pub fn summary(&self) -> Option<ResultSummary> {
        self.summary.lock().expect("summary lock").clone()
    }

    /// Records `[offset, offset + limit)` and the total count.
    pub fn trajectory_page(&self, offset: usize, limit: usize) -> (usize, Vec<TrajectoryRecord>) {
        let records = self.trajectory.read().expect("trajectory lock");
        let start = offset.min(records.len());
        let end = start.saturating_add(limit).min(records.len());
        (records.len(), records[start..end].to_vec())
    }

    pub fn cancel_requested(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Requests cancellation. A queued job is cancelled at once, a running
    /// one at its next iteration boundary. Returns false for finished jobs.
    pub fn request_cancel(&self) -> bool {
        let mut env = self.envelope.lock().expect("envelope lock");
        if env.status.is_terminal() {
            return false;
        }
        self.cancel.store(true, Ordering::SeqCst);
        if env.status == JobStatus::Queued {
            env.advance(JobStatus::Cancelled);
            let summary = ResultSummary::empty(RunStatus::Cancelled, None, env.spec.drag_pairs());
            drop(env);
            self.set_summary(summary);
            self.persist();
        }
        true
    }

    fn update(&self, f: impl FnOnce(&mut JobEnvelope)) {
        f(&mut self.envelope.lock().expect("envelope lock"));
    }

    fn advance(&self, next: JobStatus) -> bool {
        let changed = self.envelope.lock().expect("envelope lock").advance(next);
        if changed {
            self.persist();
        }
        changed
    }

    fn set_summary(&self, summary: ResultSummary) {
        if let Err(e) = bundle::write_atomic(
            &self.dir.join(bundle::RESULT_FILE),
            &serde_json::to_vec_pretty(&summary).unwrap_or_default(),
        ) {
            warn!("job {}: writing result failed: {e}", self.id);
        }
        *self.summary.lock().expect("summary lock") = Some(summary);
    }

    pub fn persist(&self) {
        let env = self.envelope();
        let written = serde_json::to_vec_pretty(&env)
            .map_err(clipdrag::Error::from)
            .and_then(|bytes| bundle::write_atomic(&self.dir.join(ENVELOPE_FILE), &bytes));
        if let Err(e) = written {
            warn!("job {}: writing envelope failed: {e}", self.id);
        }
    }

    fn fail(&self, message: String) {
        warn!("job {}: {message}", self.id);
        self.update(|env| env.error = Some(message.clone()));
        let pairs = self.envelope().spec.drag_pairs();
        self.set_summary(ResultSummary::empty(RunStatus::Failed, Some(message), pairs));
        self.advance(JobStatus::Failed);
    }
}

struct ServiceObserver<'a> {
    handle: &'a JobHandle,
    writer: BundleWriter,
}

impl EditObserver for ServiceObserver<'_> {
    fn stage(&mut self, stage: Stage) {
        self.handle.advance(stage.into());
    }

    fn iteration(&mut self, record: &TrajectoryRecord) {
        if let Err(e) = self.writer.append_record(record) {
            warn!("job {}: trajectory log: {e}", self.handle.id);
        }
        self.handle.trajectory.write().expect("trajectory lock").push(record.clone());
        self.handle.update(|env| env.record_progress(record.iteration));
    }

    fn preview(&mut self, iteration: usize, image: &Image) {
        match self.writer.write_preview(iteration, image) {
            Ok(()) => self.handle.update(|env| env.previews.push(iteration)),
            Err(e) => warn!("job {}: preview {iteration}: {e}", self.handle.id),
        }
    }

    fn cancelled(&self) -> bool {
        self.handle.cancel_requested()
    }
}

/// Runs a job to completion on the calling thread.
pub fn run_job(handle: &JobHandle) {
    if handle.status().is_terminal() {
        return;
    }
    let spec = handle.envelope().spec;
    let writer = match BundleWriter::create(&handle.dir) {
        Ok(w) => w,
        Err(e) => return handle.fail(format!("cannot prepare job directory: {e}")),
    };
    let prepared = spec.load_inputs().and_then(|inputs| {
        let dims = inputs.image.dims();
        Ok((spec.backend.build(dims)?, spec.encoder.build(dims)?, inputs))
    });
    let (model, encoder, inputs) = match prepared {
        Ok(p) => p,
        Err(e) => return handle.fail(e.to_string()),
    };
    info!("job {}: started", handle.id);
    let mut observer = ServiceObserver { handle, writer };
    match run_edit(&spec, &inputs, model, &encoder, &mut observer) {
        Ok(result) => {
            let summary = match observer.writer.finish(&result) {
                Ok(s) => s,
                Err(e) => return handle.fail(format!("writing result: {e}")),
            };
            handle.update(|env| {
                env.error = result.error.clone();
                env.record_progress(result.iterations_used);
            });
            *handle.summary.lock().expect("summary lock") = Some(summary);
            handle.advance(result.status.into());
            info!("job {}: {:?} after {} iterations", handle.id, result.status, result.iterations_used);
        }
        Err(e) => handle.fail(e.to_string()),
    }
}

/// All jobs, keyed by id, plus the id counter.
#[derive(Default)]
pub struct Registry {
    jobs: RwLock<BTreeMap<String, Arc<JobHandle>>>,
    next: Mutex<u64>,
}

impl Registry {
    /// Loads every job directory under `root`.
    pub fn load(root: &Path) -> clipdrag::Result<Self> {
        std::fs::create_dir_all(root)?;
        let registry = Self::default();
        let mut highest = 0;
        for entry in std::fs::read_dir(root)? {
            let dir = entry?.path();
            if !dir.join(ENVELOPE_FILE).is_file() {
                continue;
            }
            match JobHandle::restore(&dir) {
                Ok(handle) => {
                    highest = highest.max(parse_id(&handle.id).unwrap_or(0));
                    registry.insert(Arc::new(handle));
                }
                Err(e) => warn!("skipping {}: {e}", dir.display()),
            }
        }
        *registry.next.lock().expect("id lock") = highest + 1;
        Ok(registry)
    }

    pub fn next_id(&self) -> String {
        let mut next = self.next.lock().expect("id lock");
        let id = format!("job-{:06}", *next);
        *next += 1;
        id
    }

    pub fn insert(&self, handle: Arc<JobHandle>) {
        self.jobs.write().expect("registry lock").insert(handle.id.clone(), handle);
    }

    pub fn get(&self, id: &str) -> Option<Arc<JobHandle>> {
        self.jobs.read().expect("registry lock").get(id).cloned()
    }

    pub fn all(&self) -> Vec<Arc<JobHandle>> {
        self.jobs.read().expect("registry lock").values().cloned().collect()
    }
}

fn parse_id(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use JobStatus::*;

    const ALL: [JobStatus; 8] = [Queued, Finetuning, Inverting, Optimizing, Denoising, Done, Failed, Cancelled];

    #[test]
    fn status_machine_only_moves_forward() {
        for from in ALL {
            for to in ALL {
                let allowed = from.can_advance_to(to);
                let expected = !from.is_terminal() && (matches!(to, Failed | Cancelled) || to.rank() > from.rank());
                assert_eq!(allowed, expected, "{from:?} -> {to:?}");
            }
        }
        assert!(Queued.can_advance_to(Cancelled));
        assert!(Denoising.can_advance_to(Done));
        assert!(!Optimizing.can_advance_to(Inverting));
        assert!(!Done.can_advance_to(Failed));
    }

    #[test]
    fn envelope_timestamps_follow_transitions() {
        let spec = JobSpec::new("x.png", "a", "", vec![[1.0, 1.0, 2.0, 2.0]]);
        let mut env = JobEnvelope::new("job-000001".into(), spec, false);
        assert!(env.started_at.is_none());
        assert!(env.advance(Finetuning));
        assert!(env.started_at.is_some() && env.finished_at.is_none());
        env.record_progress(5);
        env.record_progress(3);
        assert_eq!(env.progress, 5);
        assert!(!env.advance(Queued));
        assert!(env.advance(Cancelled));
        assert!(env.finished_at.is_some());
        assert!(!env.advance(Done));
        assert_eq!(env.status, Cancelled);
    }

    #[test]
    fn queued_cancel_is_immediate_and_persisted() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("job-000007");
        std::fs::create_dir_all(&dir).unwrap();
        let spec = JobSpec::new("x.png", "a", "", vec![[1.0, 1.0, 2.0, 2.0]]);
        let handle = JobHandle::new(dir, JobEnvelope::new("job-000007".into(), spec, false));
        assert!(handle.request_cancel());
        assert_eq!(handle.status(), Cancelled);
        assert!(!handle.request_cancel());
        assert_eq!(handle.summary().unwrap().status, RunStatus::Cancelled);

        let registry = Registry::load(root.path()).unwrap();
        let restored = registry.get("job-000007").unwrap();
        assert_eq!(restored.status(), Cancelled);
        assert_eq!(registry.next_id(), "job-000008");
    }

    #[test]
    fn restore_marks_interrupted_jobs_failed() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("job-000003");
        std::fs::create_dir_all(&dir).unwrap();
        let spec = JobSpec::new("x.png", "a", "", vec![[1.0, 1.0, 2.0, 2.0]]);
        let handle = JobHandle::new(dir.clone(), JobEnvelope::new("job-000003".into(), spec, false));
        handle.advance(Optimizing);
        let registry = Registry::load(root.path()).unwrap();
        let env = registry.get("job-000003").unwrap().envelope();
        assert_eq!(env.status, Failed);
        assert!(env.error.unwrap().contains("restart"));
    }
}
