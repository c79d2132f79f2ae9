//! In-process job queue: uploads are persisted, their ids go on a channel,
//! and a fixed pool of workers runs the pipeline one job at a time each.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::Utc;
use drscreen_core::{run_pipeline, PipelineConfig};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use uuid::Uuid;

use crate::error::{Result, ServiceError};
use crate::model::{CaseMetadata, Job, JobState};
use crate::store::{LoadIssue, Store};

pub const DEFAULT_MAX_UPLOAD: usize = 20 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
    /// Largest accepted image payload in bytes.
    pub max_upload: usize,
    pub pipeline: PipelineConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { data_dir: data_dir.into(), workers: 1, max_upload: DEFAULT_MAX_UPLOAD, pipeline: PipelineConfig::default() }
    }
}

pub struct Service {
    store: Arc<Store>,
    pipeline: Arc<PipelineConfig>,
    max_upload: usize,
    tx: mpsc::UnboundedSender<Uuid>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Service {
    /// Opens the store, starts the workers and requeues every job left
    /// unfinished by a previous process. Must run inside a Tokio runtime.
    pub fn start(cfg: ServiceConfig) -> Result<(Arc<Self>, Vec<LoadIssue>)> {
        cfg.pipeline.validate()?;
        if cfg.workers == 0 {
            return Err(ServiceError::Validation("at least one worker is required".into()));
        }
        let (store, issues) = Store::open(&cfg.data_dir)?;
        let store = Arc::new(store);
        let pipeline = Arc::new(cfg.pipeline);
        let (tx, rx) = mpsc::unbounded_channel();
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        let workers = (0..cfg.workers)
            .map(|_| tokio::spawn(work(store.clone(), pipeline.clone(), rx.clone())))
            .collect();
        for id in store.unfinished() {
            let _ = tx.send(id);
        }
        let service = Self { store, pipeline, max_upload: cfg.max_upload, tx, workers: Mutex::new(workers) };
        Ok((Arc::new(service), issues))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn pipeline(&self) -> &PipelineConfig {
        &self.pipeline
    }

    pub fn max_upload(&self) -> usize {
        self.max_upload
    }

    /// Persists the upload as a queued job and schedules it. Identical
    /// uploads become separate jobs.
    pub fn submit(&self, metadata: CaseMetadata, payload: &[u8]) -> Result<Job> {
        if payload.len() > self.max_upload {
            return Err(ServiceError::PayloadTooLarge(self.max_upload));
        }
        if payload.is_empty() {
            return Err(ServiceError::Validation("image payload is empty".into()));
        }
        metadata.validate()?;
        let job = self.store.create(metadata, payload, Utc::now())?;
        self.tx.send(job.id).map_err(|_| ServiceError::Conflict("service is shutting down".into()))?;
        Ok(job)
    }

    /// Stops the workers. A job cut off mid-run stays `running` on disk and
    /// is picked up again by the next start.
    pub fn shutdown(&self) {
        for w in self.workers.lock().unwrap().drain(..) {
            w.abort();
        }
    }
}

async fn work(store: Arc<Store>, pipeline: Arc<PipelineConfig>, rx: Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<Uuid>>>) {
    loop {
        let Some(id) = rx.lock().await.recv().await else {
            return;
        };
        let (store, pipeline) = (store.clone(), pipeline.clone());
        let _ = tokio::task::spawn_blocking(move || process(&store, &pipeline, id)).await;
    }
}

/// Runs one job to a terminal state. Decode and storage failures end in
/// `failed` with the error text.
pub fn process(store: &Store, pipeline: &PipelineConfig, id: Uuid) {
    let Ok(record) = store.record(id) else {
        return;
    };
    match record.job.state {
        JobState::Queued => {
            if store.advance(id, JobState::Running, Utc::now()).is_err() {
                return;
            }
        }
        JobState::Running => {}
        JobState::Done | JobState::Failed => return,
    }
    let result = store.input(id).and_then(|bytes| {
        let outcome = run_pipeline(&bytes, pipeline, &id.to_string(), record.job.submitted)?;
        store.complete(id, &outcome.report, &outcome.overlay_png, Utc::now())
    });
    if let Err(e) = result {
        let _ = store.fail(id, e.to_string(), Utc::now());
    }
}
