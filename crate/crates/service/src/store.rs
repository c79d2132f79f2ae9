//! Durable case store: one directory per case under `<data>/cases/<id>/`
//! holding `job.json`, the uploaded `input.bin`, and once analyzed
//! `report.json` and `overlay.png`. Every file is replaced atomically.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use drscreen_core::pipeline::OVERLAY_NAME;
use drscreen_core::CaseReport;
use uuid::Uuid;

use crate::error::{Result, ServiceError};
use crate::model::{CaseMetadata, CaseRecord, CaseSummary, Job, JobState, Outcome, Review, ReviewDecision};

const RECORD: &str = "job.json";
const INPUT: &str = "input.bin";
const REPORT: &str = "report.json";

/// A case directory that could not be loaded.
#[derive(Clone, Debug)]
pub struct LoadIssue {
    pub path: PathBuf,
    pub reason: String,
}

/// Listing filter; bounds are inclusive and apply to submission time.
#[derive(Clone, Debug, Default)]
pub struct CaseFilter {
    pub clinic: Option<String>,
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl CaseFilter {
    pub fn matches(&self, r: &CaseRecord) -> bool {
        self.clinic.as_ref().map_or(true, |c| *c == r.metadata.clinic)
            && self.from.map_or(true, |t| r.job.submitted >= t)
            && self.to.map_or(true, |t| r.job.submitted <= t)
    }
}

pub struct Store {
    root: PathBuf,
    records: RwLock<HashMap<Uuid, CaseRecord>>,
    corrupt: RwLock<HashMap<Uuid, LoadIssue>>,
    locks: Mutex<HashMap<Uuid, Arc<Mutex<()>>>>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl Store {
    /// Opens or creates a store. Unreadable case directories are reported and
    /// kept out of the index; the rest load normally.
    pub fn open(root: impl Into<PathBuf>) -> Result<(Self, Vec<LoadIssue>)> {
        let root = root.into();
        fs::create_dir_all(root.join("cases"))?;
        let mut records = HashMap::new();
        let mut corrupt = HashMap::new();
        let mut issues = Vec::new();
        for entry in fs::read_dir(root.join("cases"))? {
            let path = entry?.path();
            let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(|n| Uuid::parse_str(n).ok()) else {
                continue;
            };
            match read_record(&path) {
                Ok(r) if r.job.id == id => {
                    records.insert(id, r);
                }
                Ok(r) => {
                    let issue = LoadIssue { path: path.clone(), reason: format!("record names case {}", r.job.id) };
                    corrupt.insert(id, issue.clone());
                    issues.push(issue);
                }
                Err(e) => {
                    let issue = LoadIssue { path: path.clone(), reason: e.to_string() };
                    corrupt.insert(id, issue.clone());
                    issues.push(issue);
                }
            }
        }
        issues.sort_by(|a, b| a.path.cmp(&b.path));
        let store = Self {
            root,
            records: RwLock::new(records),
            corrupt: RwLock::new(corrupt),
            locks: Mutex::new(HashMap::new()),
        };
        Ok((store, issues))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: Uuid) -> PathBuf {
        self.root.join("cases").join(id.to_string())
    }

    fn lock(&self, id: Uuid) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(id).or_default().clone()
    }

    /// Persists a new queued case with its payload.
    pub fn create(&self, metadata: CaseMetadata, payload: &[u8], at: DateTime<Utc>) -> Result<Job> {
        let id = Uuid::new_v4();
        let dir = self.dir(id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(INPUT), payload)?;
        let record = CaseRecord { job: Job::new(id, at), metadata, outcome: None, review: None };
        write_atomic(&dir.join(RECORD), &serde_json::to_vec_pretty(&record)?)?;
        self.records.write().unwrap().insert(id, record.clone());
        Ok(record.job)
    }

    pub fn record(&self, id: Uuid) -> Result<CaseRecord> {
        if let Some(r) = self.records.read().unwrap().get(&id) {
            return Ok(r.clone());
        }
        match self.corrupt.read().unwrap().get(&id) {
            Some(issue) => Err(ServiceError::Corrupt { path: issue.path.clone(), reason: issue.reason.clone() }),
            None => Err(ServiceError::NotFound(id)),
        }
    }

    /// Applies `f` to the record under the case lock and persists the result.
    /// Nothing is written when `f` fails.
    pub fn update<T>(&self, id: Uuid, f: impl FnOnce(&mut CaseRecord) -> Result<T>) -> Result<(CaseRecord, T)> {
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap();
        let mut record = self.record(id)?;
        let value = f(&mut record)?;
        write_atomic(&self.dir(id).join(RECORD), &serde_json::to_vec_pretty(&record)?)?;
        self.records.write().unwrap().insert(id, record.clone());
        Ok((record, value))
    }

    pub fn advance(&self, id: Uuid, next: JobState, at: DateTime<Utc>) -> Result<Job> {
        Ok(self.update(id, |r| r.job.advance(next, at))?.0.job)
    }

    pub fn fail(&self, id: Uuid, error: String, at: DateTime<Utc>) -> Result<Job> {
        let (record, ()) = self.update(id, |r| {
            r.job.advance(JobState::Failed, at)?;
            r.job.error = Some(error);
            Ok(())
        })?;
        Ok(record.job)
    }

    /// Writes the artifacts, then marks the job done.
    pub fn complete(&self, id: Uuid, report: &CaseReport, overlay_png: &[u8], at: DateTime<Utc>) -> Result<Job> {
        let dir = self.dir(id);
        write_atomic(&dir.join(OVERLAY_NAME), overlay_png)?;
        write_atomic(&dir.join(REPORT), &serde_json::to_vec_pretty(report)?)?;
        let outcome = Outcome {
            accepted: report.accepted,
            reason: report.reason.clone(),
            level: report.grade.as_ref().map(|g| g.level),
            referral: report.grade.as_ref().map(|g| g.referral),
        };
        let (record, ()) = self.update(id, |r| {
            r.job.advance(JobState::Done, at)?;
            r.outcome = Some(outcome);
            Ok(())
        })?;
        Ok(record.job)
    }

    pub fn input(&self, id: Uuid) -> Result<Vec<u8>> {
        self.record(id)?;
        Ok(fs::read(self.dir(id).join(INPUT))?)
    }

    /// The stored report as written, after checking that it parses.
    pub fn report_json(&self, id: Uuid) -> Result<Vec<u8>> {
        let record = self.record(id)?;
        ready(&record)?;
        let path = self.dir(id).join(REPORT);
        let bytes = fs::read(&path)?;
        serde_json::from_slice::<CaseReport>(&bytes)
            .map_err(|e| ServiceError::Corrupt { path, reason: e.to_string() })?;
        Ok(bytes)
    }

    pub fn report(&self, id: Uuid) -> Result<CaseReport> {
        Ok(serde_json::from_slice(&self.report_json(id)?)?)
    }

    pub fn overlay(&self, id: Uuid) -> Result<Vec<u8>> {
        ready(&self.record(id)?)?;
        Ok(fs::read(self.dir(id).join(OVERLAY_NAME))?)
    }

    /// Records the first review of a graded case. Resending the stored
    /// decision returns it with `false`; any other decision conflicts.
    pub fn stored_review(&self, id: Uuid) -> Result<Review> {
        self.record(id)?.review.ok_or(ServiceError::NoReview(id))
    }

    pub fn review(&self, id: Uuid, decision: ReviewDecision, at: DateTime<Utc>) -> Result<(Review, bool)> {
        let record = self.record(id)?;
        ready(&record)?;
        if let Some(existing) = record.review {
            return if existing.decision == decision {
                Ok((existing, false))
            } else {
                Err(ServiceError::Conflict("case already reviewed".into()))
            };
        }
        let (level, referral) = match &record.outcome {
            Some(Outcome { level: Some(l), referral: Some(r), .. }) => (*l, *r),
            _ => return Err(ServiceError::Conflict("rejected cases carry no grade to review".into())),
        };
        decision.validate(level, referral)?;
        let (_, out) = self.update(id, |r| match &r.review {
            Some(existing) if existing.decision == decision => Ok((existing.clone(), false)),
            Some(_) => Err(ServiceError::Conflict("case already reviewed".into())),
            None => {
                let review = Review { decision, recorded: at };
                r.review = Some(review.clone());
                Ok((review, true))
            }
        })?;
        Ok(out)
    }

    /// Matching cases ordered by submission time.
    pub fn list(&self, filter: &CaseFilter) -> Vec<CaseSummary> {
        let records = self.records.read().unwrap();
        let mut out: Vec<CaseSummary> = records.values().filter(|r| filter.matches(r)).map(CaseSummary::from).collect();
        out.sort_by(|a, b| a.submitted.cmp(&b.submitted).then(a.case_id.cmp(&b.case_id)));
        out
    }

    /// Jobs that were queued or running when the store was last closed.
    pub fn unfinished(&self) -> Vec<Uuid> {
        let records = self.records.read().unwrap();
        let mut jobs: Vec<&Job> = records.values().map(|r| &r.job).filter(|j| !j.state.is_terminal()).collect();
        jobs.sort_by(|a, b| a.submitted.cmp(&b.submitted).then(a.id.cmp(&b.id)));
        jobs.into_iter().map(|j| j.id).collect()
    }

    pub fn counts(&self) -> HashMap<&'static str, usize> {
        let mut counts = HashMap::new();
        for r in self.records.read().unwrap().values() {
            *counts.entry(r.job.state.as_str()).or_default() += 1;
        }
        counts
    }
}

fn read_record(dir: &Path) -> Result<CaseRecord> {
    let path = dir.join(RECORD);
    let bytes = fs::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| ServiceError::Corrupt { path, reason: e.to_string() })
}

fn ready(record: &CaseRecord) -> Result<()> {
    match record.job.state {
        JobState::Done => Ok(()),
        JobState::Failed => Err(ServiceError::JobFailed(record.job.error.clone().unwrap_or_default())),
        s => Err(ServiceError::Conflict(format!("case is {}", s.as_str()))),
    }
}
