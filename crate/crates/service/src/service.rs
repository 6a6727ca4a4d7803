//! Comment pipeline over the event log: classify, generate, validate, show,
//! and record author and reviewer actions.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use crfix_core::backend::Backend;
use crfix_core::classify::{ActionabilityClassifier, ActionabilityLabel, ReviewComment};
use crfix_core::funnel::{
    actionable_to_applied, next_state, shown_to_applied, ArchiveReason, EventKind, FunnelCounts, FunnelEvent,
    IllegalTransition, LifecycleAction, Suggestion, SuggestionState, TimeWindow,
};
use crfix_core::generate::{generate_patch, GenerationRequest, OutcomeStatus};
use crfix_core::patch::{apply_patch, detect_applied, AppliedStatus, AppliedVerdict, DetectMode, SourceFile};
use crfix_core::validate::{gate_shown, run_validators, select_checks, CheckConfig, ValidationReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Notify, Semaphore};

use crate::config::PipelineConfig;
use crate::store::{CommentStatus, EventLog, LogCorruption, Projection, Stage, StoreError, SuggestionRecord};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid comment: {0}")]
    InvalidComment(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error("comment {0} is still being processed")]
    InProgress(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::InvalidComment(_) => "invalid_comment",
            ServiceError::InvalidRequest(_) => "invalid_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::IllegalTransition(_) => "illegal_transition",
            ServiceError::InProgress(_) => "in_progress",
            ServiceError::Storage(_) => "storage_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserAction {
    Accept,
    Discard,
    Approve,
    Disapprove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Display {
    Expanded,
    Collapsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayHints {
    pub author: Display,
    pub reviewer: Display,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionView {
    #[serde(flatten)]
    pub suggestion: Suggestion,
    pub diff_id: String,
    pub file_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub applied_content: Option<String>,
    pub display: DisplayHints,
}

impl SuggestionView {
    fn of(r: &SuggestionRecord) -> Self {
        let author = if r.suggestion.reviewer_disapproved {
            Display::Collapsed
        } else {
            Display::Expanded
        };
        SuggestionView {
            suggestion: r.suggestion.clone(),
            diff_id: r.diff_id.clone(),
            file_path: r.file_path.clone(),
            applied_content: r.applied_content.clone(),
            display: DisplayHints {
                author,
                reviewer: Display::Collapsed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub from: i64,
    pub to: i64,
    #[serde(flatten)]
    pub counts: FunnelCounts,
    pub actionable_to_applied: Option<f64>,
    pub shown_to_applied: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub suggestion_id: String,
    pub verdict: AppliedVerdict,
}

struct State {
    projection: Projection,
    log: EventLog,
    /// Comments with a pipeline task in flight.
    running: HashSet<String>,
    /// Stages not backed by an event (classification in progress).
    transient: HashMap<String, Stage>,
    poisoned: bool,
}

struct Shared {
    backend: Arc<dyn Backend>,
    classifier: Arc<dyn ActionabilityClassifier>,
    checks: Vec<CheckConfig>,
    detect_mode: DetectMode,
    state: Mutex<State>,
    generations: Semaphore,
    workspaces: Semaphore,
    tasks: AtomicUsize,
    idle: Notify,
    runtime: tokio::runtime::Handle,
}

/// Cheaply cloneable handle on the running pipeline.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

impl Service {
    /// Opens the event log named in `config` and rebuilds state from it.
    /// Must be called inside a tokio runtime.
    pub fn open(config: &PipelineConfig) -> anyhow::Result<(Service, Option<LogCorruption>)> {
        let backend = config.build_backend()?;
        let classifier = config.build_classifier(backend.clone())?;
        Ok(Self::with_parts(config, backend, classifier)?)
    }

    /// Like `open` with an explicit backend and classifier.
    pub fn with_parts(
        config: &PipelineConfig,
        backend: Arc<dyn Backend>,
        classifier: Arc<dyn ActionabilityClassifier>,
    ) -> Result<(Service, Option<LogCorruption>), StoreError> {
        let (log, rebuilt) = EventLog::open(&config.event_log_path)?;
        if let Some(c) = &rebuilt.corruption {
            tracing::warn!(line = c.line_no, reason = %c.reason, "event log truncated at corrupt line");
        }
        let state = State {
            projection: rebuilt.projection,
            log,
            running: HashSet::new(),
            transient: HashMap::new(),
            poisoned: false,
        };
        let shared = Shared {
            backend,
            classifier,
            checks: config.checks.clone(),
            detect_mode: config.detect_applied_mode,
            state: Mutex::new(state),
            generations: Semaphore::new(config.max_inflight_generations),
            workspaces: Semaphore::new(config.max_parallel_workspaces),
            tasks: AtomicUsize::new(0),
            idle: Notify::new(),
            runtime: tokio::runtime::Handle::current(),
        };
        Ok((
            Service {
                shared: Arc::new(shared),
            },
            rebuilt.corruption,
        ))
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// A copy of the current projection.
    pub fn projection(&self) -> Projection {
        self.lock().projection.clone()
    }

    /// Validates the comment, records its receipt and schedules the pipeline.
    pub fn ingest_comment(&self, comment: ReviewComment, file: SourceFile) -> Result<CommentStatus, ServiceError> {
        if comment.file_path != file.path() {
            return Err(ServiceError::InvalidComment(format!(
                "comment targets {:?} but the file is {:?}",
                comment.file_path,
                file.path()
            )));
        }
        comment.validate_against(&file).map_err(ServiceError::InvalidComment)?;

        let id = comment.id.clone();
        {
            let mut st = self.lock();
            if st.running.contains(&id) {
                return Err(ServiceError::InProgress(id));
            }
            let mut events = Vec::new();
            if let Some(existing) = st.projection.comment(&id) {
                match existing.stage {
                    Stage::NonActionable | Stage::GenerationFailed | Stage::Closed => {}
                    Stage::Shown => {
                        // One suggestion per comment: the new version replaces it.
                        let sid = existing.suggestion_id.clone().expect("shown comment has a suggestion");
                        events.push(
                            FunnelEvent::new(0, EventKind::Archived, &id)
                                .with_suggestion(sid)
                                .with("reason", json(&ArchiveReason::MergedNewerVersion)),
                        );
                    }
                    _ => return Err(ServiceError::InProgress(id)),
                }
            }
            events.push(
                FunnelEvent::new(0, EventKind::CommentReceived, &id)
                    .with("comment", json(&comment))
                    .with("file", json(&file)),
            );
            commit(&mut st, events)?;
            st.running.insert(id.clone());
            st.transient.insert(id.clone(), Stage::Classifying);
        }

        let status = CommentStatus {
            comment_id: id.clone(),
            stage: Stage::Received,
            suggestion_id: None,
            detail: None,
        };
        self.shared.tasks.fetch_add(1, Ordering::SeqCst);
        let svc = self.clone();
        self.shared.runtime.spawn(async move {
            svc.run_pipeline(comment, file).await;
            {
                let mut st = svc.lock();
                st.running.remove(&id);
                st.transient.remove(&id);
            }
            if svc.shared.tasks.fetch_sub(1, Ordering::SeqCst) == 1 {
                svc.shared.idle.notify_waiters();
            }
        });

        Ok(status)
    }

    /// Waits until no pipeline task is in flight.
    pub async fn settle(&self) {
        loop {
            let idle = self.shared.idle.notified();
            if self.shared.tasks.load(Ordering::SeqCst) == 0 {
                return;
            }
            idle.await;
        }
    }

    async fn run_pipeline(&self, comment: ReviewComment, file: SourceFile) {
        let id = comment.id.clone();
        if let Err(e) = self.pipeline_steps(comment, file).await {
            tracing::error!(comment = %id, error = %e, "pipeline aborted");
        }
    }

    async fn pipeline_steps(&self, comment: ReviewComment, file: SourceFile) -> Result<(), ServiceError> {
        let id = comment.id.clone();

        let context: Vec<String> = file.excerpt(comment.line_start, comment.line_end).to_vec();
        let classifier = self.shared.classifier.clone();
        let c2 = comment.clone();
        let label = tokio::task::spawn_blocking(move || classifier.classify(&c2, &context))
            .await
            .map_err(|e| ServiceError::Storage(e.to_string()))?
            .unwrap_or_else(|e| ActionabilityLabel {
                actionable: false,
                rationale: Some(format!("classifier error: {e}")),
            });
        {
            let mut st = self.lock();
            st.transient.remove(&id);
            if !label.actionable {
                let e = FunnelEvent::new(0, EventKind::ClassifiedNonActionable, &id)
                    .with("rationale", json(&label.rationale));
                return commit(&mut st, vec![e]);
            }
            commit(&mut st, vec![FunnelEvent::new(0, EventKind::ClassifiedActionable, &id)])?;
        }

        let request = GenerationRequest::new(comment, file.clone())
            .map_err(|e| ServiceError::InvalidComment(e.to_string()))?;
        let outcome = {
            let _permit = self.shared.generations.acquire().await.expect("semaphore open");
            let backend = self.shared.backend.clone();
            tokio::task::spawn_blocking(move || generate_patch(backend.as_ref(), &request))
                .await
                .map_err(|e| ServiceError::Storage(e.to_string()))?
        };
        let patch = match (&outcome.status, outcome.patch) {
            (OutcomeStatus::Ok, Some(p)) => p,
            (status, _) => {
                let e = FunnelEvent::new(0, EventKind::GenerationFailed, &id)
                    .with("status", json(status))
                    .with("detail", json(&outcome.detail));
                return commit(&mut self.lock(), vec![e]);
            }
        };

        let sid = {
            let mut st = self.lock();
            let sid = format!("{id}.{}", st.projection.suggestion_count_for(&id) + 1);
            let e = FunnelEvent::new(0, EventKind::SuggestionGenerated, &id)
                .with_suggestion(&sid)
                .with("patch", json(&patch))
                .with("model_id", self.shared.backend.model_id());
            commit(&mut st, vec![e])?;
            sid
        };

        let patched = apply_patch(&file, &patch).map_err(|e| ServiceError::Storage(e.to_string()))?;
        let report = {
            let _permit = self.shared.workspaces.acquire().await.expect("semaphore open");
            let checks = self.shared.checks.clone();
            tokio::task::spawn_blocking(move || validate_in_scratch(&checks, &patched))
                .await
                .map_err(|e| ServiceError::Storage(e.to_string()))?
        };

        let mut st = self.lock();
        let mut events = vec![FunnelEvent::new(0, EventKind::Validated, &id)
            .with_suggestion(&sid)
            .with("report", json(&report))];
        let approved = st
            .projection
            .suggestion(&sid)
            .is_some_and(|s| s.suggestion.reviewer_approved);
        if gate_shown(&report, approved) {
            events.push(FunnelEvent::new(0, EventKind::Shown, &id).with_suggestion(&sid));
        }
        commit(&mut st, events)
    }

    pub fn comment_status(&self, id: &str) -> Result<CommentStatus, ServiceError> {
        let st = self.lock();
        let record = st
            .projection
            .comment(id)
            .ok_or_else(|| ServiceError::NotFound(format!("comment {id}")))?;
        let mut status = record.status();
        if let Some(stage) = st.transient.get(id) {
            status.stage = *stage;
        }
        Ok(status)
    }

    pub fn suggestions_for_diff(&self, diff_id: &str) -> Vec<SuggestionView> {
        self.lock()
            .projection
            .suggestions_for_diff(diff_id)
            .map(SuggestionView::of)
            .collect()
    }

    pub fn suggestion(&self, id: &str) -> Result<SuggestionView, ServiceError> {
        self.lock()
            .projection
            .suggestion(id)
            .map(SuggestionView::of)
            .ok_or_else(|| ServiceError::NotFound(format!("suggestion {id}")))
    }

    pub fn act_on_suggestion(&self, id: &str, action: UserAction) -> Result<SuggestionView, ServiceError> {
        let mut st = self.lock();
        let record = st
            .projection
            .suggestion(id)
            .ok_or_else(|| ServiceError::NotFound(format!("suggestion {id}")))?;
        let s = &record.suggestion;
        let cid = s.comment_id.clone();
        let lifecycle = match action {
            UserAction::Accept => LifecycleAction::Accept,
            UserAction::Discard => LifecycleAction::Discard,
            UserAction::Approve => LifecycleAction::Approve,
            UserAction::Disapprove => LifecycleAction::Disapprove,
        };
        if next_state(s.state, lifecycle).is_none() {
            return Err(IllegalTransition {
                from: s.state,
                action: lifecycle,
            }
            .into());
        }

        let event = |kind| FunnelEvent::new(0, kind, &cid).with_suggestion(id);
        let events = match action {
            UserAction::Accept => {
                let comment = st
                    .projection
                    .comment(&cid)
                    .ok_or_else(|| ServiceError::NotFound(format!("comment {cid}")))?;
                let content = apply_patch(&comment.file, &s.patch)
                    .map_err(|e| ServiceError::Storage(e.to_string()))?
                    .content();
                vec![
                    event(EventKind::Accepted).with("content", content),
                    event(EventKind::Archived).with("reason", json(&ArchiveReason::Applied)),
                ]
            }
            UserAction::Discard => vec![
                event(EventKind::Discarded),
                event(EventKind::Archived).with("reason", json(&ArchiveReason::Discarded)),
            ],
            UserAction::Approve => {
                let mut v = vec![event(EventKind::ReviewerApproved)];
                // A finished but failed validation is now overridden.
                if s.state == SuggestionState::Generated && s.validation.is_some() {
                    v.push(event(EventKind::Shown));
                }
                v
            }
            UserAction::Disapprove => vec![event(EventKind::ReviewerDisapproved)],
        };
        commit(&mut st, events)?;
        Ok(SuggestionView::of(
            st.projection.suggestion(id).expect("suggestion still present"),
        ))
    }

    /// Checks shown suggestions on `diff_id` for `path` against a committed
    /// version of the file and records the ones found applied.
    pub fn record_commit(&self, diff_id: &str, committed: &SourceFile) -> Result<Vec<DetectionResult>, ServiceError> {
        let mut st = self.lock();
        let candidates: Vec<(String, String, AppliedVerdict)> = st
            .projection
            .suggestions_for_diff(diff_id)
            .filter(|s| s.file_path == committed.path() && s.suggestion.state == SuggestionState::Shown)
            .map(|s| {
                (
                    s.suggestion.id.clone(),
                    s.suggestion.comment_id.clone(),
                    detect_applied(committed, &s.suggestion.patch, self.shared.detect_mode),
                )
            })
            .collect();
        let mut events = Vec::new();
        let mut out = Vec::new();
        for (sid, cid, verdict) in candidates {
            if verdict.status != AppliedStatus::NotDetected {
                events.push(
                    FunnelEvent::new(0, EventKind::AppliedDetected, &cid)
                        .with_suggestion(&sid)
                        .with("verdict", json(&verdict)),
                );
                events.push(
                    FunnelEvent::new(0, EventKind::Archived, &cid)
                        .with_suggestion(&sid)
                        .with("reason", json(&ArchiveReason::Applied)),
                );
            }
            out.push(DetectionResult {
                suggestion_id: sid,
                verdict,
            });
        }
        commit(&mut st, events)?;
        Ok(out)
    }

    pub fn query_funnel(&self, window: TimeWindow) -> FunnelReport {
        let counts = self
            .lock()
            .projection
            .funnel(window)
            .expect("projection events are ordered");
        FunnelReport {
            from: window.from,
            to: window.to,
            counts,
            actionable_to_applied: actionable_to_applied(&counts).ok(),
            shown_to_applied: shown_to_applied(&counts).ok(),
        }
    }
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("payload serializes")
}

/// Stamps, folds and appends `events` as one batch under the state lock.
/// Timestamps never go backwards, so the log stays totally ordered.
fn commit(st: &mut State, events: Vec<FunnelEvent>) -> Result<(), ServiceError> {
    if st.poisoned {
        return Err(ServiceError::Storage("event log is unwritable".into()));
    }
    for mut e in events {
        e.ts = now_ms().max(st.projection.last_ts().unwrap_or(i64::MIN));
        st.projection
            .apply(&e)
            .map_err(|err| ServiceError::Storage(format!("rejected {:?} event: {err}", e.kind)))?;
        if let Err(err) = st.log.append(&e) {
            // Memory is now ahead of disk; refuse further writes.
            st.poisoned = true;
            return Err(ServiceError::Storage(err.to_string()));
        }
    }
    Ok(())
}

/// Relative location for `path` inside a scratch workspace.
fn workspace_relative(path: &str) -> PathBuf {
    let clean: PathBuf = Path::new(path)
        .components()
        .filter_map(|c| match c {
            Component::Normal(part) => Some(part),
            _ => None,
        })
        .collect();
    if clean.as_os_str().is_empty() {
        PathBuf::from("file")
    } else {
        clean
    }
}

/// Writes the patched file into a fresh temporary directory and runs the
/// checks selected for it there. The directory is removed on return.
fn validate_in_scratch(checks: &[CheckConfig], patched: &SourceFile) -> ValidationReport {
    let rel = workspace_relative(patched.path());
    let rel_str = rel.to_string_lossy().into_owned();
    let selected = match select_checks(checks, &rel_str) {
        Ok(s) => s,
        Err(e) => return spawn_failure("select_checks", &e.to_string()),
    };
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return spawn_failure("workspace", &e.to_string()),
    };
    let target = dir.path().join(&rel);
    let written = target
        .parent()
        .map_or(Ok(()), fs::create_dir_all)
        .and_then(|_| fs::write(&target, patched.content()));
    if let Err(e) = written {
        return spawn_failure("workspace", &e.to_string());
    }
    run_validators(&selected, dir.path())
}

fn spawn_failure(name: &str, message: &str) -> ValidationReport {
    use crfix_core::validate::{CheckCategory, CheckResult, CheckStatus};
    ValidationReport::from_results(vec![CheckResult {
        name: name.to_owned(),
        category: CheckCategory::Build,
        status: CheckStatus::SpawnError,
        exit_code: None,
        duration_ms: 0,
        stdout_excerpt: String::new(),
        stderr_excerpt: message.to_owned(),
    }])
}
