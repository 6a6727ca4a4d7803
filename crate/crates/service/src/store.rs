//! Append-only JSONL event log and the in-memory projection folded from it.
//!
//! The log is the only durable state. A line counts as committed once its
//! terminating newline is written; anything after the last valid line is
//! reported as corruption and cut off before new events are appended.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crfix_core::classify::ReviewComment;
use crfix_core::funnel::{
    funnel_counts, transition, ArchiveReason, EventKind, FunnelCounts, FunnelError, FunnelEvent, IllegalTransition,
    LifecycleAction, Suggestion, SuggestionState, TimeWindow,
};
use crfix_core::patch::{LineDiffPatch, SourceFile};
use crfix_core::validate::ValidationReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Received,
    Classifying,
    NonActionable,
    Generating,
    GenerationFailed,
    Validating,
    Shown,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentStatus {
    pub comment_id: String,
    pub stage: Stage,
    pub suggestion_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommentRecord {
    pub comment: ReviewComment,
    pub file: SourceFile,
    pub stage: Stage,
    pub suggestion_id: Option<String>,
    pub detail: Option<String>,
}

impl CommentRecord {
    pub fn status(&self) -> CommentStatus {
        CommentStatus {
            comment_id: self.comment.id.clone(),
            stage: self.stage,
            suggestion_id: self.suggestion_id.clone(),
            detail: self.detail.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuggestionRecord {
    pub suggestion: Suggestion,
    pub diff_id: String,
    pub file_path: String,
    /// File content after an accept.
    pub applied_content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProjectionError {
    #[error("{kind:?} event lacks a valid {field:?} payload: {reason}")]
    BadPayload {
        kind: EventKind,
        field: &'static str,
        reason: String,
    },
    #[error("{kind:?} event needs a suggestion id")]
    MissingSuggestionId { kind: EventKind },
    #[error("unknown comment {0:?}")]
    UnknownComment(String),
    #[error("unknown suggestion {0:?}")]
    UnknownSuggestion(String),
    #[error("suggestion {0:?} already exists")]
    DuplicateSuggestion(String),
    #[error("event at ts {ts} precedes the previous event at ts {prev}")]
    Unordered { ts: i64, prev: i64 },
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
}

/// State folded from the event log. Every mutation goes through `apply`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Projection {
    events: Vec<FunnelEvent>,
    comments: BTreeMap<String, CommentRecord>,
    suggestions: BTreeMap<String, SuggestionRecord>,
}

fn field<T: DeserializeOwned>(e: &FunnelEvent, name: &'static str) -> Result<T, ProjectionError> {
    let value = e.payload.get(name).cloned().unwrap_or(serde_json::Value::Null);
    serde_json::from_value(value).map_err(|err| ProjectionError::BadPayload {
        kind: e.kind,
        field: name,
        reason: err.to_string(),
    })
}

impl Projection {
    pub fn events(&self) -> &[FunnelEvent] {
        &self.events
    }

    pub fn comment(&self, id: &str) -> Option<&CommentRecord> {
        self.comments.get(id)
    }

    pub fn comments(&self) -> impl Iterator<Item = &CommentRecord> {
        self.comments.values()
    }

    pub fn suggestion(&self, id: &str) -> Option<&SuggestionRecord> {
        self.suggestions.get(id)
    }

    /// Suggestions on `diff_id`, ordered by id.
    pub fn suggestions_for_diff<'a>(&'a self, diff_id: &'a str) -> impl Iterator<Item = &'a SuggestionRecord> + 'a {
        self.suggestions.values().filter(move |s| s.diff_id == diff_id)
    }

    pub fn suggestion_count_for(&self, comment_id: &str) -> usize {
        self.suggestions
            .values()
            .filter(|s| s.suggestion.comment_id == comment_id)
            .count()
    }

    pub fn last_ts(&self) -> Option<i64> {
        self.events.last().map(|e| e.ts)
    }

    pub fn funnel(&self, window: TimeWindow) -> Result<FunnelCounts, FunnelError> {
        funnel_counts(&self.events, window)
    }

    /// Folds one event in. On error the projection is left unchanged.
    pub fn apply(&mut self, e: &FunnelEvent) -> Result<(), ProjectionError> {
        if let Some(prev) = self.last_ts() {
            if e.ts < prev {
                return Err(ProjectionError::Unordered { ts: e.ts, prev });
            }
        }
        match e.kind {
            EventKind::CommentReceived => {
                let comment: ReviewComment = field(e, "comment")?;
                let file: SourceFile = field(e, "file")?;
                if comment.id != e.comment_id {
                    return Err(ProjectionError::BadPayload {
                        kind: e.kind,
                        field: "comment",
                        reason: format!("id {:?} differs from the event's comment id", comment.id),
                    });
                }
                self.comments.insert(
                    e.comment_id.clone(),
                    CommentRecord {
                        comment,
                        file,
                        stage: Stage::Received,
                        suggestion_id: None,
                        detail: None,
                    },
                );
            }
            EventKind::ClassifiedActionable => {
                let c = self.comment_mut(&e.comment_id)?;
                c.stage = Stage::Generating;
                c.detail = None;
            }
            EventKind::ClassifiedNonActionable => {
                let rationale: Option<String> = field(e, "rationale")?;
                let c = self.comment_mut(&e.comment_id)?;
                c.stage = Stage::NonActionable;
                c.detail = rationale;
            }
            EventKind::GenerationFailed => {
                let status: String = field(e, "status")?;
                let detail: Option<String> = field(e, "detail")?;
                let c = self.comment_mut(&e.comment_id)?;
                c.stage = Stage::GenerationFailed;
                c.detail = Some(match detail {
                    Some(d) => format!("{status}: {d}"),
                    None => status,
                });
            }
            EventKind::SuggestionGenerated => {
                let sid = Self::sid(e)?;
                if self.suggestions.contains_key(sid) {
                    return Err(ProjectionError::DuplicateSuggestion(sid.to_owned()));
                }
                let patch: LineDiffPatch = field(e, "patch")?;
                let model_id: String = field(e, "model_id")?;
                let c = self.comment_mut(&e.comment_id)?;
                c.stage = Stage::Validating;
                c.suggestion_id = Some(sid.to_owned());
                c.detail = None;
                let record = SuggestionRecord {
                    suggestion: Suggestion::new(sid, &e.comment_id, patch, model_id, e.ts),
                    diff_id: c.comment.diff_id.clone(),
                    file_path: c.comment.file_path.clone(),
                    applied_content: None,
                };
                self.suggestions.insert(sid.to_owned(), record);
            }
            EventKind::Validated => {
                let report: ValidationReport = field(e, "report")?;
                let s = self.suggestion_mut(e)?;
                s.suggestion.validation = Some(report.clone());
                s.suggestion.updated_at = e.ts.max(s.suggestion.updated_at);
                let awaiting = !report.all_passed && !s.suggestion.reviewer_approved;
                let comment_id = s.suggestion.comment_id.clone();
                let c = self.comment_mut(&comment_id)?;
                c.detail = awaiting.then(|| "validation failed; awaiting reviewer approval".to_owned());
            }
            EventKind::Shown => {
                self.step(e, LifecycleAction::GatePassed)?;
                self.set_stage(e, Stage::Shown)?;
            }
            EventKind::ReviewerApproved => self.step(e, LifecycleAction::Approve)?,
            EventKind::ReviewerDisapproved => self.step(e, LifecycleAction::Disapprove)?,
            EventKind::Accepted | EventKind::AppliedDetected => {
                let content: Option<String> = field(e, "content")?;
                self.step(e, LifecycleAction::Accept)?;
                if let Some(content) = content {
                    self.suggestion_mut(e)?.applied_content = Some(content);
                }
                self.set_stage(e, Stage::Closed)?;
            }
            EventKind::Discarded => {
                self.step(e, LifecycleAction::Discard)?;
                self.set_stage(e, Stage::Closed)?;
            }
            EventKind::Archived => {
                let reason: ArchiveReason = field(e, "reason")?;
                self.step(e, LifecycleAction::Archive(reason))?;
                if reason == ArchiveReason::CodeChanged {
                    self.set_stage(e, Stage::Closed)?;
                }
            }
        }
        self.events.push(e.clone());
        Ok(())
    }

    fn sid(e: &FunnelEvent) -> Result<&str, ProjectionError> {
        e.suggestion_id
            .as_deref()
            .ok_or(ProjectionError::MissingSuggestionId { kind: e.kind })
    }

    fn comment_mut(&mut self, id: &str) -> Result<&mut CommentRecord, ProjectionError> {
        self.comments
            .get_mut(id)
            .ok_or_else(|| ProjectionError::UnknownComment(id.to_owned()))
    }

    fn suggestion_mut(&mut self, e: &FunnelEvent) -> Result<&mut SuggestionRecord, ProjectionError> {
        let sid = Self::sid(e)?;
        self.suggestions
            .get_mut(sid)
            .ok_or_else(|| ProjectionError::UnknownSuggestion(sid.to_owned()))
    }

    fn step(&mut self, e: &FunnelEvent, action: LifecycleAction) -> Result<(), ProjectionError> {
        let s = self.suggestion_mut(e)?;
        s.suggestion = transition(&s.suggestion, action, e.ts)?;
        Ok(())
    }

    /// Moves the owning comment's stage, if this is its current suggestion.
    fn set_stage(&mut self, e: &FunnelEvent, stage: Stage) -> Result<(), ProjectionError> {
        let sid = Self::sid(e)?.to_owned();
        let c = self.comment_mut(&e.comment_id)?;
        if c.suggestion_id.as_deref() == Some(sid.as_str()) {
            c.stage = stage;
            c.detail = None;
        }
        Ok(())
    }

    /// Whether the suggestion is in `state`.
    pub fn suggestion_in(&self, id: &str, state: SuggestionState) -> bool {
        self.suggestions.get(id).is_some_and(|s| s.suggestion.state == state)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("event log corrupt at line {line_no}: {reason}")]
pub struct LogCorruption {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("event log {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rebuilt {
    pub projection: Projection,
    pub corruption: Option<LogCorruption>,
    /// Length in bytes of the valid prefix.
    pub valid_len: u64,
}

/// Replays the log at `path`. A missing file is an empty log. Replay stops
/// at the first line that is unterminated, unparseable, or not a legal
/// continuation of the state so far.
pub fn rebuild_projection(path: &Path) -> Result<Rebuilt, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(source) => {
            return Err(StoreError::Io {
                path: path.to_owned(),
                source,
            })
        }
    };
    Ok(rebuild_from_bytes(&bytes))
}

pub fn rebuild_from_bytes(bytes: &[u8]) -> Rebuilt {
    let mut projection = Projection::default();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut corruption = None;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|b| *b == b'\n') else {
            corruption = Some(LogCorruption {
                line_no,
                reason: "unterminated final line".into(),
            });
            break;
        };
        let line = &rest[..nl];
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<FunnelEvent>(s).map_err(|e| e.to_string()))
            .and_then(|ev| projection.apply(&ev).map_err(|e| e.to_string()));
        if let Err(reason) = parsed {
            corruption = Some(LogCorruption { line_no, reason });
            break;
        }
        offset += nl + 1;
    }
    Rebuilt {
        projection,
        corruption,
        valid_len: offset as u64,
    }
}

/// Append handle on the event log.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Rebuilds the projection from `path`, cuts any corrupt tail, and opens
    /// the file for appending.
    pub fn open(path: &Path) -> Result<(EventLog, Rebuilt), StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_owned(),
            source,
        };
        let rebuilt = rebuild_projection(path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        if rebuilt.corruption.is_some() {
            file.set_len(rebuilt.valid_len).map_err(io_err)?;
        }
        Ok((
            EventLog {
                path: path.to_owned(),
                file,
            },
            rebuilt,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &FunnelEvent) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}
