//! Label-log backed review sessions for threshold calibration.
//!
//! A session holds first-round discriminator results and an append-only
//! `labels.v1` log. Reviewers label batches of ten misclassifications in
//! ascending entropy order until a batch without any `PresentInImage`
//! label is found.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{load_jsonl, to_line, JsonlError};
use crate::neg_gen::{calibrate_level, latest_labels, review_batches, Calibration, DiscriminatorResult, LabelRecord, NegGenError};
use crate::types::{EntityKind, HumanLabel};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("{kind} batch {batch_index} still has unlabeled tasks: {result_ids:?}")]
    BatchIncomplete { kind: EntityKind, batch_index: usize, result_ids: Vec<String> },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("{0} is already labeled; pass override to relabel")]
    AlreadyLabeled(String),
    #[error(transparent)]
    Labels(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub result_id: String,
    pub image_uri: String,
    pub positive: String,
    pub candidate_negative: String,
    pub entropy_nats: f64,
    pub batch_index: usize,
    #[serde(default)]
    pub label: Option<HumanLabel>,
    #[serde(default)]
    pub reviewer_id: Option<String>,
    #[serde(default)]
    pub timestamp_unix_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextBatch {
    Tasks { kind: EntityKind, batch_index: usize, tasks: Vec<ReviewTask> },
    Done { calibration: Calibration },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum LevelState {
    NeedsLabels { batch_index: usize, unlabeled: usize },
    Calibrated { theta: f64, clean_batch: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStatus {
    pub misclassified: usize,
    pub labeled: usize,
    #[serde(flatten)]
    pub state: LevelState,
}

pub fn now_unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug)]
pub struct ReviewSession {
    results: Vec<DiscriminatorResult>,
    labels: Vec<LabelRecord>,
    log: Option<PathBuf>,
}

impl ReviewSession {
    /// In-memory session; only first-round results are reviewed.
    pub fn new(results: Vec<DiscriminatorResult>, labels: Vec<LabelRecord>) -> Self {
        ReviewSession { results: results.into_iter().filter(|r| r.round == 0).collect(), labels, log: None }
    }

    /// Session that loads and appends to the label log at `path`.
    pub fn with_log(results: Vec<DiscriminatorResult>, path: &Path) -> Result<Self, ReviewError> {
        let labels = if path.exists() { load_jsonl(path)? } else { Vec::new() };
        let mut s = ReviewSession::new(results, labels);
        s.log = Some(path.to_path_buf());
        Ok(s)
    }

    pub fn labels(&self) -> &[LabelRecord] {
        &self.labels
    }

    fn task(&self, r: &DiscriminatorResult, batch_index: usize, latest: &HashMap<&str, &LabelRecord>) -> ReviewTask {
        let l = latest.get(r.result_id.as_str());
        ReviewTask {
            result_id: r.result_id.clone(),
            image_uri: r.image_uri.clone(),
            positive: r.options[0].clone(),
            candidate_negative: r.options[r.predicted].clone(),
            entropy_nats: r.entropy_nats,
            batch_index,
            label: l.map(|l| l.label),
            reviewer_id: l.map(|l| l.reviewer_id.clone()),
            timestamp_unix_ms: l.map(|l| l.timestamp_unix_ms),
        }
    }

    /// Next batch to label for `kind`, or the calibration once the walk
    /// has stopped. A partially labeled batch must be finished first.
    pub fn next_batch(&self, kind: EntityKind) -> Result<NextBatch, ReviewError> {
        let latest: HashMap<&str, &LabelRecord> = self.labels.iter().map(|l| (l.result_id.as_str(), l)).collect();
        for (b, batch) in review_batches(&self.results, kind).iter().enumerate() {
            let missing: Vec<String> =
                batch.iter().filter(|r| !latest.contains_key(r.result_id.as_str())).map(|r| r.result_id.clone()).collect();
            if missing.len() == batch.len() {
                let tasks = batch.iter().map(|r| self.task(r, b, &latest)).collect();
                return Ok(NextBatch::Tasks { kind, batch_index: b, tasks });
            }
            if !missing.is_empty() {
                return Err(ReviewError::BatchIncomplete { kind, batch_index: b, result_ids: missing });
            }
            if batch.iter().all(|r| latest[r.result_id.as_str()].label == HumanLabel::ValidNegative) {
                break;
            }
        }
        let calibration = calibrate_level(&self.results, &self.labels, kind).map_err(|e| match e {
            NegGenError::InsufficientLabels { kind, batch_index, result_ids } => ReviewError::BatchIncomplete { kind, batch_index, result_ids },
            other => ReviewError::UnknownTask(other.to_string()),
        })?;
        Ok(NextBatch::Done { calibration })
    }

    /// Records a label and appends it to the log.
    pub fn submit_label(&mut self, result_id: &str, label: HumanLabel, reviewer_id: &str, overwrite: bool) -> Result<LabelRecord, ReviewError> {
        if !self.results.iter().any(|r| !r.correct && r.result_id == result_id) {
            return Err(ReviewError::UnknownTask(result_id.to_string()));
        }
        if !overwrite && self.labels.iter().any(|l| l.result_id == result_id) {
            return Err(ReviewError::AlreadyLabeled(result_id.to_string()));
        }
        let rec = LabelRecord {
            result_id: result_id.to_string(),
            label,
            reviewer_id: reviewer_id.to_string(),
            timestamp_unix_ms: now_unix_ms(),
        };
        if let Some(path) = &self.log {
            let line = to_line(&rec).map_err(io::Error::other)?;
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{line}")?;
        }
        self.labels.push(rec.clone());
        Ok(rec)
    }

    pub fn status(&self) -> BTreeMap<EntityKind, LevelStatus> {
        let latest = latest_labels(&self.labels);
        EntityKind::ALL
            .into_iter()
            .map(|kind| {
                let batches = review_batches(&self.results, kind);
                let misclassified = batches.iter().map(Vec::len).sum();
                let labeled = batches.iter().flatten().filter(|r| latest.contains_key(r.result_id.as_str())).count();
                let state = match calibrate_level(&self.results, &self.labels, kind) {
                    Ok(c) => LevelState::Calibrated { theta: c.theta, clean_batch: c.clean_batch },
                    Err(NegGenError::InsufficientLabels { batch_index, result_ids, .. }) => {
                        LevelState::NeedsLabels { batch_index, unlabeled: result_ids.len() }
                    }
                    Err(_) => LevelState::NeedsLabels { batch_index: 0, unlabeled: misclassified },
                };
                (kind, LevelStatus { misclassified, labeled, state })
            })
            .collect()
    }
}
