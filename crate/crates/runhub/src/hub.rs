use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use abin_core::seed::derive_seed;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, RunConfig, Stage};
use crate::stages::{self, StageCtx, StageError};
use crate::HubError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Running,
    Done,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub created_at: String,
    pub config: RunConfig,
    /// Set in deterministic mode.
    pub global_seed: Option<u64>,
    /// Seed every stage seed is derived from; drawn at random outside
    /// deterministic mode and recorded so the run can still be replayed.
    pub seed: u64,
    pub status: BTreeMap<Stage, StageStatus>,
    /// Artifact file names per stage, under `artifacts/` in the run directory.
    pub artifacts: BTreeMap<Stage, Vec<String>>,
    /// Config hash in force when each stage last completed.
    pub stage_config_hash: BTreeMap<Stage, String>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    pub fn deterministic(&self) -> bool {
        self.global_seed.is_some()
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage.name(), 0)
    }

    /// Shared by the ml and gnn stages so both hold out the same units.
    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split", 0)
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config, self.seed)
    }

    pub fn status_of(&self, stage: Stage) -> &StageStatus {
        self.status.get(&stage).unwrap_or(&StageStatus::Pending)
    }

    fn downstream(&self, stage: Stage) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        let mut frontier = vec![stage];
        while let Some(s) = frontier.pop() {
            for t in Stage::ALL {
                if t.dependencies(&self.config).contains(&s) && !out.contains(&t) {
                    out.push(t);
                    frontier.push(t);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadKind {
    SeriesMatrix,
    Labels,
    Annotation,
    Interactome,
}

impl std::str::FromStr for UploadKind {
    type Err = HubError;
    fn from_str(s: &str) -> Result<Self, HubError> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| HubError::BadRequest(format!("unknown upload kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum JobOutcome {
    Done,
    Cancelled,
    Failed(String),
}

pub struct JobState {
    progress: AtomicU64,
    cancel: AtomicBool,
    outcome: Mutex<Option<JobOutcome>>,
    finished: Condvar,
}

impl JobState {
    fn new() -> Self {
        Self {
            progress: AtomicU64::new(0f64.to_bits()),
            cancel: AtomicBool::new(false),
            outcome: Mutex::new(None),
            finished: Condvar::new(),
        }
    }

    pub fn progress(&self) -> f64 {
        f64::from_bits(self.progress.load(Ordering::Acquire))
    }

    /// Progress only moves forward; for nonnegative floats the bit patterns
    /// order like the values.
    pub fn set_progress(&self, p: f64) {
        let p = p.clamp(0.0, 1.0);
        self.progress.fetch_max(p.to_bits(), Ordering::AcqRel);
    }

    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::Acquire)
    }

    fn finish(&self, outcome: JobOutcome) {
        if outcome == JobOutcome::Done {
            self.set_progress(1.0);
        }
        *self.outcome.lock().unwrap() = Some(outcome);
        self.finished.notify_all();
    }

    fn outcome(&self) -> Option<JobOutcome> {
        self.outcome.lock().unwrap().clone()
    }

    fn wait(&self) -> JobOutcome {
        let mut g = self.outcome.lock().unwrap();
        while g.is_none() {
            g = self.finished.wait(g).unwrap();
        }
        g.clone().unwrap()
    }
}

#[derive(Clone)]
pub struct JobHandle {
    pub run_id: String,
    pub stage: Stage,
    state: Arc<JobState>,
}

impl JobHandle {
    pub fn progress(&self) -> f64 {
        self.state.progress()
    }

    pub fn cancel(&self) {
        self.state.cancel.store(true, Ordering::Release);
    }

    pub fn is_finished(&self) -> bool {
        self.state.outcome().is_some()
    }

    /// Block until the job ends.
    pub fn wait(&self) -> Result<(), HubError> {
        match self.state.wait() {
            JobOutcome::Done => Ok(()),
            JobOutcome::Cancelled => Err(HubError::StageFailed {
                stage: self.stage,
                diagnostic: "cancelled".into(),
            }),
            JobOutcome::Failed(d) => Err(HubError::StageFailed {
                stage: self.stage,
                diagnostic: d,
            }),
        }
    }
}

/// Snapshot of one stage of one run, as served by the jobs endpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobStatus {
    pub run_id: String,
    pub stage: Stage,
    pub status: StageStatus,
    pub progress: f64,
    pub config_hash: String,
}

struct RunSlot {
    dir: PathBuf,
    record: Mutex<RunRecord>,
    /// Held by the running job; later jobs of the same run queue on it.
    active: Mutex<()>,
    jobs: Mutex<BTreeMap<Stage, Arc<JobState>>>,
}

impl RunSlot {
    fn persist(&self, rec: &RunRecord) -> Result<(), HubError> {
        write_atomic(&self.dir.join("record.json"), serde_json::to_string_pretty(rec).unwrap().as_bytes())
    }

    fn update<T>(&self, f: impl FnOnce(&mut RunRecord) -> T) -> Result<T, HubError> {
        let mut rec = self.record.lock().unwrap();
        let out = f(&mut rec);
        self.persist(&rec)?;
        Ok(out)
    }
}

/// Workspace of runs under `<root>/runs/<run_id>/`.
pub struct Hub {
    root: PathBuf,
    runs: Mutex<HashMap<String, Arc<RunSlot>>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HubError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

impl Hub {
    pub fn open(root: impl Into<PathBuf>) -> Result<Hub, HubError> {
        let root = root.into();
        fs::create_dir_all(root.join("runs"))
            .map_err(|e| HubError::StorageUnavailable(format!("{}: {e}", root.display())))?;
        Ok(Hub {
            root,
            runs: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    /// `seed` switches on deterministic mode.
    pub fn create_run(&self, config: RunConfig, seed: Option<u64>) -> Result<RunRecord, HubError> {
        config.validate()?;
        let run_id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.run_dir(&run_id);
        fs::create_dir_all(dir.join("artifacts"))?;
        fs::create_dir_all(dir.join("uploads"))?;
        let rec = RunRecord {
            run_id: run_id.clone(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            config,
            global_seed: seed,
            seed: seed.unwrap_or_else(rand::random),
            status: Stage::ALL.into_iter().map(|s| (s, StageStatus::Pending)).collect(),
            artifacts: BTreeMap::new(),
            stage_config_hash: BTreeMap::new(),
            warnings: Vec::new(),
        };
        let slot = Arc::new(RunSlot {
            dir,
            record: Mutex::new(rec.clone()),
            active: Mutex::new(()),
            jobs: Mutex::new(BTreeMap::new()),
        });
        slot.persist(&rec)?;
        self.runs.lock().unwrap().insert(run_id, slot);
        Ok(rec)
    }

    fn slot(&self, id: &str) -> Result<Arc<RunSlot>, HubError> {
        if !valid_run_id(id) {
            return Err(HubError::NotFound(format!("run {id:?}")));
        }
        let mut runs = self.runs.lock().unwrap();
        if let Some(s) = runs.get(id) {
            return Ok(Arc::clone(s));
        }
        let dir = self.run_dir(id);
        let text = fs::read_to_string(dir.join("record.json")).map_err(|_| HubError::NotFound(format!("run {id:?}")))?;
        let mut rec: RunRecord =
            serde_json::from_str(&text).map_err(|e| HubError::StorageUnavailable(format!("record of {id}: {e}")))?;
        // nothing is running in a fresh process: a stage left running or
        // queued was interrupted
        for st in rec.status.values_mut() {
            if matches!(st, StageStatus::Running) {
                *st = StageStatus::Failed {
                    reason: "interrupted".into(),
                };
            }
        }
        let slot = Arc::new(RunSlot {
            dir,
            record: Mutex::new(rec.clone()),
            active: Mutex::new(()),
            jobs: Mutex::new(BTreeMap::new()),
        });
        slot.persist(&rec)?;
        runs.insert(id.to_string(), Arc::clone(&slot));
        Ok(slot)
    }

    pub fn get_run(&self, id: &str) -> Result<RunRecord, HubError> {
        Ok(self.slot(id)?.record.lock().unwrap().clone())
    }

    /// Persisted runs, oldest first.
    pub fn list_runs(&self) -> Result<Vec<RunRecord>, HubError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("runs"))? {
            let name = entry?.file_name().to_string_lossy().to_string();
            if let Ok(rec) = self.get_run(&name) {
                out.push(rec);
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.run_id.cmp(&b.run_id)));
        Ok(out)
    }

    /// Merge stage-section overrides into the run's config.
    pub fn update_config(&self, id: &str, stage: Stage, patch: &serde_json::Value) -> Result<RunRecord, HubError> {
        let slot = self.slot(id)?;
        slot.update(|rec| rec.config.patch_stage(stage, patch).map(|_| rec.clone()))?
    }

    /// Store an input file in the run directory and point the config at it.
    pub fn upload(&self, id: &str, kind: UploadKind, filename: &str, bytes: &[u8]) -> Result<RunRecord, HubError> {
        let slot = self.slot(id)?;
        let base = Path::new(filename)
            .file_name()
            .map(|f| f.to_string_lossy().to_string())
            .filter(|f| !f.starts_with('.') && !f.is_empty())
            .ok_or_else(|| HubError::BadRequest(format!("bad file name {filename:?}")))?;
        fs::write(slot.dir.join("uploads").join(&base), bytes)?;
        let rel = format!("uploads/{base}");
        slot.update(|rec| {
            let c = &mut rec.config;
            match kind {
                UploadKind::SeriesMatrix => c.dataset.series_matrix = Some(rel),
                UploadKind::Labels => c.dataset.labels = Some(rel),
                UploadKind::Annotation => c.dataset.annotation = Some(rel),
                UploadKind::Interactome => c.network.interactome = Some(rel),
            }
            rec.clone()
        })
    }

    /// Queue a stage on a background worker. Jobs of one run execute one at
    /// a time in submission order.
    pub fn execute_stage(&self, id: &str, stage: Stage) -> Result<JobHandle, HubError> {
        let slot = self.slot(id)?;
        let job = Arc::new(JobState::new());
        {
            let mut rec = slot.record.lock().unwrap();
            let missing: Vec<Stage> = stage
                .dependencies(&rec.config)
                .into_iter()
                .filter(|d| rec.status_of(*d) != &StageStatus::Done)
                .collect();
            if !missing.is_empty() {
                return Err(HubError::DependencyNotMet { stage, missing });
            }
            let mut jobs = slot.jobs.lock().unwrap();
            if jobs.get(&stage).is_some_and(|j| j.outcome().is_none()) {
                return Err(HubError::StageBusy(format!("stage {stage} is already queued or running")));
            }
            rec.status.insert(stage, StageStatus::Pending);
            slot.persist(&rec)?;
            jobs.insert(stage, Arc::clone(&job));
        }
        let worker_slot = Arc::clone(&slot);
        let worker_job = Arc::clone(&job);
        thread::Builder::new()
            .name(format!("abin-{stage}"))
            .spawn(move || run_job(&worker_slot, stage, &worker_job))
            .map_err(|e| HubError::StorageUnavailable(format!("cannot start worker: {e}")))?;
        Ok(JobHandle {
            run_id: id.to_string(),
            stage,
            state: job,
        })
    }

    pub fn job_status(&self, id: &str, stage: Stage) -> Result<JobStatus, HubError> {
        let slot = self.slot(id)?;
        let rec = slot.record.lock().unwrap();
        let status = rec.status_of(stage).clone();
        let progress = match slot.jobs.lock().unwrap().get(&stage) {
            Some(j) => j.progress(),
            None if status == StageStatus::Done => 1.0,
            None => 0.0,
        };
        Ok(JobStatus {
            run_id: id.to_string(),
            stage,
            config_hash: rec.stage_config_hash.get(&stage).cloned().unwrap_or_else(|| rec.config_hash()),
            status,
            progress,
        })
    }

    pub fn cancel(&self, id: &str, stage: Stage) -> Result<(), HubError> {
        let slot = self.slot(id)?;
        let jobs = slot.jobs.lock().unwrap();
        let job = jobs
            .get(&stage)
            .filter(|j| j.outcome().is_none())
            .ok_or_else(|| HubError::NotFound(format!("active job for stage {stage}")))?;
        job.cancel.store(true, Ordering::Release);
        Ok(())
    }

    /// Path and producing config hash of a named artifact.
    pub fn artifact(&self, id: &str, name: &str) -> Result<(PathBuf, String), HubError> {
        let slot = self.slot(id)?;
        let rec = slot.record.lock().unwrap();
        let stage = rec
            .artifacts
            .iter()
            .find(|(_, names)| names.iter().any(|n| n == name))
            .map(|(s, _)| *s)
            .ok_or_else(|| HubError::NotFound(format!("artifact {name:?}")))?;
        let hash = rec.stage_config_hash.get(&stage).cloned().unwrap_or_default();
        Ok((slot.dir.join("artifacts").join(name), hash))
    }

    /// Cancel and wait out every job, drop in-memory state, and with
    /// `purge` delete all persisted runs.
    pub fn reset(&self, purge: bool) -> Result<(), HubError> {
        let slots: Vec<Arc<RunSlot>> = self.runs.lock().unwrap().drain().map(|(_, s)| s).collect();
        let jobs: Vec<Arc<JobState>> = slots
            .iter()
            .flat_map(|s| s.jobs.lock().unwrap().values().cloned().collect::<Vec<_>>())
            .collect();
        for j in &jobs {
            j.cancel.store(true, Ordering::Release);
        }
        for j in &jobs {
            j.wait();
        }
        if purge {
            let runs = self.root.join("runs");
            fs::remove_dir_all(&runs)?;
            fs::create_dir_all(&runs)?;
        }
        Ok(())
    }
}

fn remove_artifacts(dir: &Path, names: &[String]) {
    for n in names {
        let _ = fs::remove_file(dir.join("artifacts").join(n));
    }
}

/// Drop the artifacts of `stage` and everything downstream of it; done
/// downstream stages go back to pending.
fn invalidate(rec: &mut RunRecord, dir: &Path, stage: Stage) {
    for s in std::iter::once(stage).chain(rec.downstream(stage)) {
        if let Some(old) = rec.artifacts.remove(&s) {
            remove_artifacts(dir, &old);
        }
        rec.stage_config_hash.remove(&s);
        if s != stage && rec.status_of(s) == &StageStatus::Done {
            rec.status.insert(s, StageStatus::Pending);
        }
    }
}

fn run_job(slot: &RunSlot, stage: Stage, job: &JobState) {
    let _active = slot.active.lock().unwrap_or_else(|p| p.into_inner());
    let outcome = execute(slot, stage, job);
    let status = match &outcome {
        JobOutcome::Done => StageStatus::Done,
        JobOutcome::Cancelled => StageStatus::Failed {
            reason: "cancelled".into(),
        },
        JobOutcome::Failed(d) => StageStatus::Failed { reason: d.clone() },
    };
    if let Err(e) = slot.update(|rec| {
        if status != StageStatus::Done {
            // a failed stage keeps no artifacts from an earlier success, and
            // nothing built on them stays done
            invalidate(rec, &slot.dir, stage);
        }
        rec.status.insert(stage, status);
    }) {
        warn!("could not persist status of {stage}: {e}");
    }
    info!("stage {stage} finished: {outcome:?}");
    job.finish(outcome);
}

fn execute(slot: &RunSlot, stage: Stage, job: &JobState) -> JobOutcome {
    if job.cancelled() {
        return JobOutcome::Cancelled;
    }
    let snapshot = match slot.update(|rec| {
        rec.status.insert(stage, StageStatus::Running);
        rec.clone()
    }) {
        Ok(r) => r,
        Err(e) => return JobOutcome::Failed(e.to_string()),
    };
    let ctx = StageCtx {
        dir: &slot.dir,
        record: &snapshot,
        seed: snapshot.stage_seed(stage),
        job,
    };
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| stages::run(stage, &ctx)));
    let output = match result {
        Ok(Ok(out)) => out,
        Ok(Err(StageError::Cancelled)) => return JobOutcome::Cancelled,
        Ok(Err(StageError::Failed(d))) => return JobOutcome::Failed(d),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            return JobOutcome::Failed(format!("internal error: {msg}"));
        }
    };
    if job.cancelled() {
        return JobOutcome::Cancelled;
    }

    // Stage files land in a scratch directory first and are moved into
    // place together, so a crash never leaves a done stage half-written.
    let scratch = slot.dir.join(format!(".tmp-{stage}"));
    let _ = fs::remove_dir_all(&scratch);
    let written: Result<(), std::io::Error> = (|| {
        fs::create_dir_all(&scratch)?;
        for (name, bytes) in &output.files {
            fs::write(scratch.join(name), bytes)?;
        }
        Ok(())
    })();
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&scratch);
        return JobOutcome::Failed(format!("writing artifacts: {e}"));
    }
    let committed = slot.update(|rec| -> Result<(), std::io::Error> {
        invalidate(rec, &slot.dir, stage);
        for (name, _) in &output.files {
            fs::rename(scratch.join(name), slot.dir.join("artifacts").join(name))?;
        }
        rec.artifacts.insert(stage, output.files.iter().map(|(n, _)| n.clone()).collect());
        rec.stage_config_hash.insert(stage, config_hash(&snapshot.config, snapshot.seed));
        rec.warnings.extend(output.warnings.iter().map(|w| format!("{stage}: {w}")));
        Ok(())
    });
    let _ = fs::remove_dir_all(&scratch);
    match committed {
        Ok(Ok(())) => JobOutcome::Done,
        Ok(Err(e)) => JobOutcome::Failed(format!("moving artifacts: {e}")),
        Err(e) => JobOutcome::Failed(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn progress_never_decreases(updates in prop::collection::vec(-0.5f64..1.5, 1..60)) {
            let job = JobState::new();
            let mut last = job.progress();
            for u in updates {
                job.set_progress(u);
                let p = job.progress();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!(p >= last);
                last = p;
            }
        }
    }

    #[test]
    fn finished_outcome_is_final() {
        let job = JobState::new();
        job.set_progress(0.4);
        job.finish(JobOutcome::Done);
        assert_eq!(job.progress(), 1.0);
        assert_eq!(job.wait(), JobOutcome::Done);
    }

    #[test]
    fn upload_kind_parses_snake_case() {
        assert_eq!("series_matrix".parse::<UploadKind>().unwrap(), UploadKind::SeriesMatrix);
        assert!("matrix".parse::<UploadKind>().is_err());
    }
}
