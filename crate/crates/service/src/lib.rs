//! Review service: sample bundles for the expert console, the decision log, and
//! re-evaluation jobs that replay decisions into an augmented training set.
//!
//! Store layout under the configured directory:
//!
//! ```text
//! artifacts/<sha256>     content-addressed blobs (PNGs, raw saliency, dataset documents, reports)
//! decisions.jsonl        append-only decision log with chained digests
//! reports/latest.json    most recent metric report
//! text-cache/            cached vision-language responses
//! ```

pub mod http;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockWriteGuard};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xedge_core::artifact::{image_png, mask_png, saliency_preview_png, saliency_raw_bytes, write_bytes};
use xedge_core::augment::{replay_decisions, DecisionAction, SampleId};
use xedge_core::dataset::{build_category_mask_resized, write_dataset, Dataset};
use xedge_core::model::{class_for_category, predict_scores, Concurrency, SegmentationModel};
use xedge_core::report::{
    aggregate_rows, emit_report, explain_sample, load_model_input, report_timestamp, sample_seed, score_sample,
    EvalConfig, MethodAggregate, MetricReport, ReportFormat, SampleRow, XaiMethod,
};
use xedge_core::{AugmentError, MetricError, ReportError};
use xedge_textual::{build_prompt, request_cached, ChatBackend, ResponseCache, RetryPolicy, SampleImages, TextConfig};

use crate::store::{sniff_media_type, ArtifactStore, DecisionLog, LogEntry, LogEntryBody, GENESIS_DIGEST};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("sample {0} is still being prepared")]
    Pending(SampleId),
    #[error("sample {0} is read-only")]
    ReadOnly(SampleId),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("no decisions recorded for {0}")]
    EmptyLog(String),
    #[error("unauthorized")]
    Unauthorized,
    #[error("storage failure at {path}: {message}")]
    Storage { path: PathBuf, message: String },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("sample preparation failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

impl ServiceError {
    pub(crate) fn storage(path: &Path, e: impl std::fmt::Display) -> Self {
        ServiceError::Storage { path: path.to_path_buf(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Model and explainer used to build bundles and re-score samples.
#[derive(Clone)]
pub struct Evaluator {
    pub model: Arc<dyn SegmentationModel>,
    pub method: XaiMethod,
    pub cfg: EvalConfig,
}

#[derive(Clone)]
pub struct TextSettings {
    pub backend: Arc<dyn ChatBackend + Send + Sync>,
    pub config: TextConfig,
    pub policy: RetryPolicy,
}

#[derive(Clone, Default)]
pub struct ServiceConfig {
    pub store_dir: PathBuf,
    /// Static bearer token; `None` disables the check.
    pub token: Option<String>,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub digest: String,
    pub media_type: String,
    pub url: String,
}

impl ArtifactRef {
    fn new(digest: String, bytes: &[u8]) -> Self {
        Self { url: format!("/artifacts/{digest}"), media_type: sniff_media_type(bytes).to_string(), digest }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleRefs {
    pub image: ArtifactRef,
    pub ground_truth: ArtifactRef,
    pub prediction: ArtifactRef,
    pub saliency_preview: ArtifactRef,
    pub saliency_raw: ArtifactRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBundle {
    pub sample: SampleId,
    pub image_id: u64,
    pub category_id: u64,
    pub category: String,
    pub split: Split,
    pub editable: bool,
    pub model_id: String,
    pub method: String,
    pub refs: BundleRefs,
    /// `None` when the saliency map carried no energy.
    pub metrics: Option<SampleRow>,
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleStatus {
    Pending,
    Ready,
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: SampleId,
    pub image_id: u64,
    pub category_id: u64,
    pub category: String,
    pub split: Split,
    pub editable: bool,
    #[serde(flatten)]
    pub status: SampleStatus,
}

#[derive(Debug, Clone)]
enum Slot {
    Pending,
    Ready(Box<SampleBundle>),
    Failed(String),
}

#[derive(Debug, Clone)]
struct SampleMeta {
    split: Split,
    category: String,
}

/// Body of `POST /decisions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub sample: SampleId,
    pub decision: DecisionAction,
    pub author: String,
    #[serde(default)]
    pub client_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionAck {
    pub index: u64,
    pub decision_id: String,
    pub digest: String,
}

/// Result of [`ServiceState::record_decision`]. `created` is false when the
/// client token matched an earlier entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recorded {
    pub ack: DecisionAck,
    pub created: bool,
}

impl From<&LogEntry> for DecisionAck {
    fn from(e: &LogEntry) -> Self {
        Self { index: e.body.index, decision_id: e.body.decision_id.clone(), digest: e.digest.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum JobScope {
    Sample { sample: SampleId },
    Dataset,
}

impl JobScope {
    fn covers(&self, sample: SampleId) -> bool {
        match self {
            JobScope::Sample { sample: s } => *s == sample,
            JobScope::Dataset => true,
        }
    }

    fn label(&self) -> String {
        match self {
            JobScope::Sample { sample } => format!("sample {sample}"),
            JobScope::Dataset => "the dataset".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_active(self) -> bool {
        matches!(self, JobStatus::Pending | JobStatus::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub augmented_dataset: ArtifactRef,
    pub dataset_digest: String,
    pub decisions_applied: usize,
    pub rows: Vec<SampleRow>,
    pub skipped: usize,
    pub report: Option<ArtifactRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    #[serde(flatten)]
    pub scope: JobScope,
    pub status: JobStatus,
    pub created_at: String,
    /// Log digest the job replays up to.
    pub log_head: String,
    pub result: Option<JobResult>,
    pub error: Option<String>,
}

struct Inner {
    cfg: ServiceConfig,
    train: Dataset,
    val: Dataset,
    evaluator: Evaluator,
    text: Option<TextSettings>,
    store: ArtifactStore,
    samples: BTreeMap<SampleId, SampleMeta>,
    slots: RwLock<BTreeMap<SampleId, Slot>>,
    log: Mutex<DecisionLog>,
    jobs: Mutex<Vec<Job>>,
    gate: RwLock<()>,
}

/// Shared service state. Cheap to clone.
#[derive(Clone)]
pub struct ServiceState {
    inner: Arc<Inner>,
}

/// Holds re-evaluation jobs in the running state until dropped.
pub struct JobPause<'a> {
    _guard: RwLockWriteGuard<'a, ()>,
}

fn enumerate_samples(ds: &Dataset, split: Split, out: &mut BTreeMap<SampleId, SampleMeta>) -> Result<(), ServiceError> {
    for img in ds.images() {
        for cat in ds.labeled_categories() {
            let mask = build_category_mask_resized(ds, img.id, cat.id, img.height, img.width).map_err(ReportError::from)?;
            if !mask.is_empty() {
                out.insert(
                    SampleId { image_id: img.id, category_id: cat.id },
                    SampleMeta { split, category: cat.name.clone() },
                );
            }
        }
    }
    Ok(())
}

impl ServiceState {
    /// Opens the store and indexes every `(image, category)` pair with a labeled
    /// region. Training samples accept decisions; validation samples are read-only.
    pub fn open(
        cfg: ServiceConfig,
        train: Dataset,
        val: Dataset,
        evaluator: Evaluator,
        text: Option<TextSettings>,
    ) -> Result<Self, ServiceError> {
        let overlap: Vec<u64> = {
            let t: BTreeSet<u64> = train.images().iter().map(|i| i.id).collect();
            val.images().iter().map(|i| i.id).filter(|id| t.contains(id)).collect()
        };
        if !overlap.is_empty() {
            return Err(ServiceError::Invalid(format!("images {overlap:?} appear in both splits")));
        }
        let store = ArtifactStore::open(cfg.store_dir.join("artifacts"))?;
        let log = DecisionLog::open(cfg.store_dir.join("decisions.jsonl"))?;
        let mut samples = BTreeMap::new();
        enumerate_samples(&train, Split::Train, &mut samples)?;
        enumerate_samples(&val, Split::Val, &mut samples)?;
        let slots = samples.keys().map(|k| (*k, Slot::Pending)).collect();
        Ok(Self {
            inner: Arc::new(Inner {
                cfg,
                train,
                val,
                evaluator,
                text,
                store,
                samples,
                slots: RwLock::new(slots),
                log: Mutex::new(log),
                jobs: Mutex::new(Vec::new()),
                gate: RwLock::new(()),
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.cfg
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.inner.store
    }

    pub fn train(&self) -> &Dataset {
        &self.inner.train
    }

    fn dataset(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.inner.train,
            Split::Val => &self.inner.val,
        }
    }

    fn meta(&self, id: SampleId) -> Result<&SampleMeta, ServiceError> {
        self.inner.samples.get(&id).ok_or_else(|| ServiceError::NotFound(format!("sample {id}")))
    }

    pub fn list_samples(&self) -> Vec<SampleSummary> {
        let slots = self.inner.slots.read().expect("slots lock");
        self.inner
            .samples
            .iter()
            .map(|(id, meta)| SampleSummary {
                id: *id,
                image_id: id.image_id,
                category_id: id.category_id,
                category: meta.category.clone(),
                split: meta.split,
                editable: meta.split == Split::Train,
                status: match &slots[id] {
                    Slot::Pending => SampleStatus::Pending,
                    Slot::Ready(_) => SampleStatus::Ready,
                    Slot::Failed(m) => SampleStatus::Failed { message: m.clone() },
                },
            })
            .collect()
    }

    pub fn get_sample_bundle(&self, id: SampleId) -> Result<SampleBundle, ServiceError> {
        self.meta(id)?;
        match &self.inner.slots.read().expect("slots lock")[&id] {
            Slot::Pending => Err(ServiceError::Pending(id)),
            Slot::Ready(b) => Ok((**b).clone()),
            Slot::Failed(m) => Err(ServiceError::Failed(m.clone())),
        }
    }

    fn put(&self, bytes: &[u8]) -> Result<ArtifactRef, ServiceError> {
        Ok(ArtifactRef::new(self.inner.store.put(bytes)?, bytes))
    }

    /// Explains and scores one sample against `ds`, storing every artifact.
    fn build_bundle(&self, id: SampleId, ds: &Dataset, split: Split) -> Result<SampleBundle, ServiceError> {
        let ev = &self.inner.evaluator;
        let model = ev.model.as_ref();
        let img = load_model_input(ds, model, id.image_id)?;
        let (h, w) = (img.height(), img.width());
        let gt = build_category_mask_resized(ds, id.image_id, id.category_id, h, w).map_err(ReportError::from)?;
        let scores = predict_scores(model, &img).map_err(MetricError::from).map_err(ReportError::from)?;
        let class = class_for_category(model, &scores, id.category_id)
            .map_err(MetricError::from)
            .map_err(ReportError::from)?;
        let pred = scores.argmax_mask(class);
        let seed = sample_seed(ev.cfg.seed, id.image_id, id.category_id);
        let explanation = explain_sample(ev.method, model, &img, id.category_id, &ev.cfg.rise, seed)?;
        let metrics = match score_sample(model, &img, &gt, &explanation, &ev.cfg.faithfulness, id.image_id) {
            Ok(row) => Some(row),
            Err(ReportError::Metric(MetricError::ZeroEnergy)) => None,
            Err(e) => return Err(e.into()),
        };
        let png = |r: Result<Vec<u8>, xedge_core::ArtifactError>| r.map_err(ReportError::from);
        let image_bytes = png(image_png(&img))?;
        let gt_bytes = png(mask_png(&gt))?;
        let pred_bytes = png(mask_png(&pred))?;
        let preview_bytes = png(saliency_preview_png(&explanation.saliency))?;
        let refs = BundleRefs {
            image: self.put(&image_bytes)?,
            ground_truth: self.put(&gt_bytes)?,
            prediction: self.put(&pred_bytes)?,
            saliency_preview: self.put(&preview_bytes)?,
            saliency_raw: self.put(&saliency_raw_bytes(&explanation.saliency))?,
        };
        let category = ds.category(id.category_id).map_err(ReportError::from)?.name.clone();
        let (text, text_error) = match &self.inner.text {
            None => (None, None),
            Some(t) => {
                let images = SampleImages::complete(image_bytes, gt_bytes, pred_bytes, preview_bytes);
                let cache = ResponseCache::new(self.inner.cfg.store_dir.join("text-cache"));
                match build_prompt(&images, &category, &t.config)
                    .and_then(|req| request_cached(&req, t.backend.as_ref(), &t.config, t.policy, Some(&cache)))
                {
                    Ok(resp) => (Some(resp.text), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            }
        };
        Ok(SampleBundle {
            sample: id,
            image_id: id.image_id,
            category_id: id.category_id,
            category,
            split,
            editable: split == Split::Train,
            model_id: explanation.model.model_id.clone(),
            method: explanation.method.clone(),
            refs,
            metrics,
            text,
            text_error,
        })
    }

    /// Builds one bundle and publishes it.
    pub fn prepare_sample(&self, id: SampleId) -> Result<(), ServiceError> {
        let split = self.meta(id)?.split;
        let slot = match self.build_bundle(id, self.dataset(split), split) {
            Ok(b) => Slot::Ready(Box::new(b)),
            Err(e) => Slot::Failed(e.to_string()),
        };
        self.inner.slots.write().expect("slots lock").insert(id, slot);
        Ok(())
    }

    /// Prepares every sample, in parallel when the model allows it.
    pub fn prepare_all(&self) {
        let ids: Vec<SampleId> = self.inner.samples.keys().copied().collect();
        match self.inner.evaluator.model.concurrency() {
            Concurrency::ConcurrentSafe => ids.par_iter().for_each(|id| {
                let _ = self.prepare_sample(*id);
            }),
            Concurrency::Exclusive => ids.iter().for_each(|id| {
                let _ = self.prepare_sample(*id);
            }),
        }
    }

    pub fn spawn_preparation(&self) -> std::thread::JoinHandle<()> {
        let state = self.clone();
        std::thread::spawn(move || state.prepare_all())
    }

    pub fn record_decision(&self, req: DecisionRequest) -> Result<Recorded, ServiceError> {
        let meta = self.meta(req.sample)?;
        if meta.split != Split::Train {
            return Err(ServiceError::ReadOnly(req.sample));
        }
        req.decision.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        if req.author.trim().is_empty() {
            return Err(ServiceError::Invalid("author is empty".into()));
        }
        if req.client_token.as_deref().is_some_and(|t| t.trim().is_empty()) {
            return Err(ServiceError::Invalid("client token is empty".into()));
        }
        let mut log = self.inner.log.lock().expect("log lock");
        if let Some(token) = &req.client_token {
            if let Some(prev) = log.find_token(token) {
                if prev.body.sample != req.sample || prev.body.decision != req.decision || prev.body.author != req.author {
                    return Err(ServiceError::Conflict(format!("client token {token:?} already used for another decision")));
                }
                return Ok(Recorded { ack: prev.into(), created: false });
            }
        }
        let index = log.entries().len() as u64;
        let entry = log.append(LogEntryBody {
            index,
            decision_id: format!("dec-{index:06}"),
            sample: req.sample,
            decision: req.decision,
            author: req.author,
            client_token: req.client_token,
            timestamp: report_timestamp(),
            prev: GENESIS_DIGEST.to_string(),
        })?;
        Ok(Recorded { ack: entry.into(), created: true })
    }

    pub fn decisions(&self) -> (String, Vec<LogEntry>) {
        let log = self.inner.log.lock().expect("log lock");
        (log.head().to_string(), log.entries().to_vec())
    }

    /// Decisions of `scope` in log order, up to `head` (inclusive).
    fn scoped_entries(&self, scope: &JobScope, head: Option<&str>) -> Vec<LogEntry> {
        let log = self.inner.log.lock().expect("log lock");
        let mut out = Vec::new();
        for e in log.entries() {
            if scope.covers(e.body.sample) {
                out.push(e.clone());
            }
            if head == Some(e.digest.as_str()) {
                break;
            }
        }
        out
    }

    /// The training set with the scope's decisions applied in log order.
    pub fn replay_scope(&self, scope: &JobScope) -> Result<Dataset, ServiceError> {
        let entries = self.scoped_entries(scope, None);
        Ok(replay_decisions(&self.inner.train, entries.iter().map(|e| (e.body.sample, &e.body.decision)))?)
    }

    pub fn trigger_reevaluation(&self, scope: JobScope) -> Result<Job, ServiceError> {
        if let JobScope::Sample { sample } = &scope {
            if self.meta(*sample)?.split != Split::Train {
                return Err(ServiceError::ReadOnly(*sample));
            }
        }
        let head = self.inner.log.lock().expect("log lock").head().to_string();
        if self.scoped_entries(&scope, None).is_empty() {
            return Err(ServiceError::EmptyLog(scope.label()));
        }
        let job = {
            let mut jobs = self.inner.jobs.lock().expect("jobs lock");
            if let Some(active) = jobs.iter().find(|j| j.scope == scope && j.status.is_active()) {
                return Err(ServiceError::Conflict(format!("job {} is already running for {}", active.id, scope.label())));
            }
            let job = Job {
                id: format!("job-{:04}", jobs.len() + 1),
                scope,
                status: JobStatus::Pending,
                created_at: report_timestamp(),
                log_head: head,
                result: None,
                error: None,
            };
            jobs.push(job.clone());
            job
        };
        let state = self.clone();
        let id = job.id.clone();
        std::thread::spawn(move || state.run_job(&id));
        Ok(job)
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut Job)) {
        let mut jobs = self.inner.jobs.lock().expect("jobs lock");
        if let Some(j) = jobs.iter_mut().find(|j| j.id == id) {
            f(j);
        }
    }

    fn run_job(&self, id: &str) {
        self.update_job(id, |j| j.status = JobStatus::Running);
        let _gate = self.inner.gate.read().expect("job gate");
        let job = self.get_job(id).expect("job exists");
        let outcome = self.execute_job(&job);
        self.update_job(id, |j| match outcome {
            Ok(r) => {
                j.status = JobStatus::Done;
                j.result = Some(r);
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(e.to_string());
            }
        });
    }

    fn execute_job(&self, job: &Job) -> Result<JobResult, ServiceError> {
        let entries = self.scoped_entries(&job.scope, Some(&job.log_head));
        let augmented = replay_decisions(&self.inner.train, entries.iter().map(|e| (e.body.sample, &e.body.decision)))?;
        let doc = write_dataset(&augmented);
        let dataset_ref = self.put(&doc)?;
        let touched: BTreeSet<SampleId> = entries.iter().map(|e| e.body.sample).collect();
        let mut rows = Vec::new();
        let mut skipped = 0;
        for id in touched {
            let bundle = self.build_bundle(id, &augmented, Split::Train)?;
            match bundle.metrics.clone() {
                Some(row) => rows.push(row),
                None => skipped += 1,
            }
            self.inner.slots.write().expect("slots lock").insert(id, Slot::Ready(Box::new(bundle)));
        }
        let report = if rows.is_empty() {
            None
        } else {
            let name = self.inner.evaluator.method.name();
            let agg = MethodAggregate { scores: aggregate_rows(name, &rows), rows: rows.clone(), skipped };
            let report = MetricReport::build(&[agg], augmented.digest())?;
            let text = emit_report(&report, ReportFormat::Json);
            let path = self.latest_report_path();
            write_bytes(&path, text.as_bytes()).map_err(|e| ServiceError::storage(&path, e))?;
            Some(self.put(text.as_bytes())?)
        };
        Ok(JobResult {
            augmented_dataset: dataset_ref,
            dataset_digest: augmented.digest(),
            decisions_applied: entries.len(),
            rows,
            skipped,
            report,
        })
    }

    pub fn get_job(&self, id: &str) -> Result<Job, ServiceError> {
        let jobs = self.inner.jobs.lock().expect("jobs lock");
        jobs.iter()
            .find(|j| j.id == id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    /// Polls until the job leaves the active states or `timeout` elapses.
    pub fn wait_for_job(&self, id: &str, timeout: Duration) -> Result<Job, ServiceError> {
        let start = Instant::now();
        loop {
            let job = self.get_job(id)?;
            if !job.status.is_active() || start.elapsed() > timeout {
                return Ok(job);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Keeps jobs from finishing until the returned guard drops.
    pub fn pause_jobs(&self) -> JobPause<'_> {
        JobPause { _guard: self.inner.gate.write().expect("job gate") }
    }

    pub fn latest_report_path(&self) -> PathBuf {
        self.inner.cfg.store_dir.join("reports").join("latest.json")
    }

    pub fn latest_report(&self) -> Result<Vec<u8>, ServiceError> {
        let path = self.latest_report_path();
        std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ServiceError::NotFound("no report yet".into()),
            _ => ServiceError::storage(&path, e),
        })
    }
}
