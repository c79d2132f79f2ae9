use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Result, ServiceError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
}

impl std::str::FromStr for Eye {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" | "os" => Ok(Eye::Left),
            "right" | "r" | "od" => Ok(Eye::Right),
            other => Err(ServiceError::Validation(format!("eye must be left or right, got {other:?}"))),
        }
    }
}

/// Who the image belongs to, as supplied with the upload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMetadata {
    pub clinic: String,
    pub patient: String,
    pub eye: Eye,
}

impl CaseMetadata {
    pub fn validate(&self) -> Result<()> {
        if self.clinic.trim().is_empty() || self.patient.trim().is_empty() {
            return Err(ServiceError::Validation("clinic and patient must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }

    fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Done | JobState::Failed => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: Uuid,
    pub state: JobState,
    pub submitted: DateTime<Utc>,
    pub started: Option<DateTime<Utc>>,
    pub completed: Option<DateTime<Utc>>,
    pub error: Option<String>,
}

impl Job {
    pub fn new(id: Uuid, submitted: DateTime<Utc>) -> Self {
        Self { id, state: JobState::Queued, submitted, started: None, completed: None, error: None }
    }

    /// Moves the job forward. States never move back, and a finished job
    /// never changes again.
    pub fn advance(&mut self, next: JobState, at: DateTime<Utc>) -> Result<()> {
        if next.rank() <= self.state.rank() {
            return Err(ServiceError::Transition { from: self.state.as_str(), to: next.as_str() });
        }
        match next {
            JobState::Running => self.started = Some(at),
            JobState::Done | JobState::Failed => self.completed = Some(at),
            JobState::Queued => {}
        }
        self.state = next;
        Ok(())
    }
}

/// Headline of a finished analysis, kept beside the job for listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub accepted: bool,
    pub reason: String,
    pub level: Option<u8>,
    pub referral: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewAction {
    Confirm,
    Override,
}

/// A clinician's verdict on an algorithm grade.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    /// Client-chosen id; resending the same decision is harmless.
    pub decision_id: Uuid,
    pub reviewer: String,
    pub action: ReviewAction,
    pub final_level: u8,
    pub final_referral: bool,
    #[serde(default)]
    pub note: Option<String>,
}

impl ReviewDecision {
    /// Checks the decision against the algorithm's grade.
    pub fn validate(&self, level: u8, referral: bool) -> Result<()> {
        if self.reviewer.trim().is_empty() {
            return Err(ServiceError::Validation("reviewer must not be empty".into()));
        }
        if self.final_level > 4 {
            return Err(ServiceError::Validation(format!("final level {} outside 0..=4", self.final_level)));
        }
        match self.action {
            ReviewAction::Override if self.note.as_deref().map_or(true, |n| n.trim().is_empty()) => {
                Err(ServiceError::Validation("an override needs a note".into()))
            }
            ReviewAction::Confirm if (self.final_level, self.final_referral) != (level, referral) => {
                Err(ServiceError::Validation("a confirmation must repeat the algorithm grade".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub decision: ReviewDecision,
    pub recorded: DateTime<Utc>,
}

/// Everything the store keeps about a case besides its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub job: Job,
    pub metadata: CaseMetadata,
    pub outcome: Option<Outcome>,
    pub review: Option<Review>,
}

/// One worklist row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: Uuid,
    pub clinic: String,
    pub patient: String,
    pub eye: Eye,
    pub state: JobState,
    pub submitted: DateTime<Utc>,
    pub completed: Option<DateTime<Utc>>,
    pub outcome: Option<Outcome>,
    pub reviewed: bool,
}

impl From<&CaseRecord> for CaseSummary {
    fn from(r: &CaseRecord) -> Self {
        Self {
            case_id: r.job.id,
            clinic: r.metadata.clinic.clone(),
            patient: r.metadata.patient.clone(),
            eye: r.metadata.eye,
            state: r.job.state,
            submitted: r.job.submitted,
            completed: r.job.completed,
            outcome: r.outcome.clone(),
            reviewed: r.review.is_some(),
        }
    }
}
