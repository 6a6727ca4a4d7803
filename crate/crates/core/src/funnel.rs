//! Suggestion lifecycle and funnel metrics.
//!
//! ```text
//! generated --gate_passed--> shown --accept--> accepted --archive(applied)--> archived
//!                              |  \--discard--> discarded --archive(discarded)--> archived
//!                              \--archive(code_changed | merged_newer_version)--> archived
//! ```
//!
//! Approve and disapprove are flag updates, legal while generated or shown.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patch::LineDiffPatch;
use crate::validate::ValidationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuggestionState {
    Generated,
    Shown,
    Accepted,
    Discarded,
    Archived,
}

impl SuggestionState {
    pub const ALL: [SuggestionState; 5] = [
        SuggestionState::Generated,
        SuggestionState::Shown,
        SuggestionState::Accepted,
        SuggestionState::Discarded,
        SuggestionState::Archived,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveReason {
    Applied,
    Discarded,
    CodeChanged,
    MergedNewerVersion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", content = "reason", rename_all = "snake_case")]
pub enum LifecycleAction {
    GatePassed,
    Accept,
    Discard,
    Archive(ArchiveReason),
    Approve,
    Disapprove,
}

impl LifecycleAction {
    pub const ALL: [LifecycleAction; 9] = [
        LifecycleAction::GatePassed,
        LifecycleAction::Accept,
        LifecycleAction::Discard,
        LifecycleAction::Archive(ArchiveReason::Applied),
        LifecycleAction::Archive(ArchiveReason::Discarded),
        LifecycleAction::Archive(ArchiveReason::CodeChanged),
        LifecycleAction::Archive(ArchiveReason::MergedNewerVersion),
        LifecycleAction::Approve,
        LifecycleAction::Disapprove,
    ];
}

impl fmt::Display for LifecycleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LifecycleAction::GatePassed => f.write_str("gate_passed"),
            LifecycleAction::Accept => f.write_str("accept"),
            LifecycleAction::Discard => f.write_str("discard"),
            LifecycleAction::Archive(r) => write!(f, "archive({r:?})"),
            LifecycleAction::Approve => f.write_str("approve"),
            LifecycleAction::Disapprove => f.write_str("disapprove"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition: {action} from {from:?}")]
pub struct IllegalTransition {
    pub from: SuggestionState,
    pub action: LifecycleAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: String,
    pub comment_id: String,
    pub patch: LineDiffPatch,
    pub state: SuggestionState,
    pub archive_reason: Option<ArchiveReason>,
    pub reviewer_approved: bool,
    pub reviewer_disapproved: bool,
    pub validation: Option<ValidationReport>,
    pub model_id: String,
    pub created_at: i64,
    pub updated_at: i64,
}

impl Suggestion {
    pub fn new(
        id: impl Into<String>,
        comment_id: impl Into<String>,
        patch: LineDiffPatch,
        model_id: impl Into<String>,
        created_at: i64,
    ) -> Self {
        Suggestion {
            id: id.into(),
            comment_id: comment_id.into(),
            patch,
            state: SuggestionState::Generated,
            archive_reason: None,
            reviewer_approved: false,
            reviewer_disapproved: false,
            validation: None,
            model_id: model_id.into(),
            created_at,
            updated_at: created_at,
        }
    }
}

/// Next state for `action`, or `None` when the action is illegal. Flag
/// actions keep the state unchanged.
pub fn next_state(from: SuggestionState, action: LifecycleAction) -> Option<SuggestionState> {
    use ArchiveReason as R;
    use LifecycleAction as A;
    use SuggestionState as S;
    match (from, action) {
        (S::Generated, A::GatePassed) => Some(S::Shown),
        (S::Shown, A::Accept) => Some(S::Accepted),
        (S::Shown, A::Discard) => Some(S::Discarded),
        (S::Accepted, A::Archive(R::Applied)) => Some(S::Archived),
        (S::Discarded, A::Archive(R::Discarded)) => Some(S::Archived),
        (S::Shown, A::Archive(R::CodeChanged | R::MergedNewerVersion)) => Some(S::Archived),
        (S::Generated | S::Shown, A::Approve | A::Disapprove) => Some(from),
        _ => None,
    }
}

pub fn transition(s: &Suggestion, action: LifecycleAction, at: i64) -> Result<Suggestion, IllegalTransition> {
    let state = next_state(s.state, action).ok_or(IllegalTransition { from: s.state, action })?;
    let mut out = s.clone();
    out.state = state;
    out.updated_at = at.max(s.updated_at);
    match action {
        LifecycleAction::Approve => out.reviewer_approved = true,
        LifecycleAction::Disapprove => out.reviewer_disapproved = true,
        LifecycleAction::Archive(reason) => out.archive_reason = Some(reason),
        _ => {}
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CommentReceived,
    ClassifiedActionable,
    ClassifiedNonActionable,
    SuggestionGenerated,
    GenerationFailed,
    Validated,
    Shown,
    ReviewerApproved,
    ReviewerDisapproved,
    Accepted,
    AppliedDetected,
    Discarded,
    Archived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelEvent {
    /// Milliseconds since the Unix epoch.
    pub ts: i64,
    pub kind: EventKind,
    pub comment_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion_id: Option<String>,
    #[serde(default)]
    pub payload: serde_json::Map<String, serde_json::Value>,
}

impl FunnelEvent {
    pub fn new(ts: i64, kind: EventKind, comment_id: impl Into<String>) -> Self {
        FunnelEvent {
            ts,
            kind,
            comment_id: comment_id.into(),
            suggestion_id: None,
            payload: serde_json::Map::new(),
        }
    }

    pub fn with_suggestion(mut self, suggestion_id: impl Into<String>) -> Self {
        self.suggestion_id = Some(suggestion_id.into());
        self
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.payload.insert(key.to_owned(), value.into());
        self
    }
}

/// Half-open interval `[from, to)` of comment receipt times, in ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub from: i64,
    pub to: i64,
}

impl TimeWindow {
    pub const ALL: TimeWindow = TimeWindow {
        from: i64::MIN,
        to: i64::MAX,
    };

    pub fn new(from: i64, to: i64) -> Self {
        TimeWindow { from, to }
    }

    pub fn contains(&self, ts: i64) -> bool {
        self.from <= ts && ts < self.to
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunnelCounts {
    pub universe: u64,
    pub actionable: u64,
    pub shown: u64,
    pub applied: u64,
    pub discarded: u64,
}

impl FunnelCounts {
    pub fn is_consistent(&self) -> bool {
        self.applied + self.discarded <= self.shown
            && self.shown <= self.actionable
            && self.actionable <= self.universe
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FunnelError {
    #[error("event {index} at ts {ts} precedes the previous event at ts {prev}")]
    UnorderedEvents { index: usize, ts: i64, prev: i64 },
    #[error("rate denominator is zero")]
    ZeroDenominator,
}

#[derive(Default)]
struct CommentFlags {
    actionable: bool,
    shown: bool,
    applied: bool,
    discarded: bool,
}

/// Counts the funnel for comments received inside `window`.
///
/// Every stage is counted per comment and only along the funnel chain, so a
/// comment counts as shown only if it was classified actionable, and as
/// applied or discarded only if it was shown. Applied (an accept or a
/// detected application) wins over discarded for the same comment.
pub fn funnel_counts(events: &[FunnelEvent], window: TimeWindow) -> Result<FunnelCounts, FunnelError> {
    for (i, pair) in events.windows(2).enumerate() {
        if pair[1].ts < pair[0].ts {
            return Err(FunnelError::UnorderedEvents {
                index: i + 1,
                ts: pair[1].ts,
                prev: pair[0].ts,
            });
        }
    }

    let mut cohort: BTreeSet<&str> = BTreeSet::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for e in events.iter().filter(|e| e.kind == EventKind::CommentReceived) {
        // First receipt fixes the comment's cohort.
        if seen.insert(&e.comment_id) && window.contains(e.ts) {
            cohort.insert(&e.comment_id);
        }
    }

    let mut flags: BTreeMap<&str, CommentFlags> = cohort.iter().map(|c| (*c, CommentFlags::default())).collect();
    for e in events {
        let Some(f) = flags.get_mut(e.comment_id.as_str()) else {
            continue;
        };
        match e.kind {
            EventKind::ClassifiedActionable => f.actionable = true,
            EventKind::Shown => f.shown = true,
            EventKind::Accepted | EventKind::AppliedDetected => f.applied = true,
            EventKind::Discarded => f.discarded = true,
            _ => {}
        }
    }

    let mut c = FunnelCounts {
        universe: cohort.len() as u64,
        ..FunnelCounts::default()
    };
    for f in flags.values().filter(|f| f.actionable) {
        c.actionable += 1;
        if !f.shown {
            continue;
        }
        c.shown += 1;
        if f.applied {
            c.applied += 1;
        } else if f.discarded {
            c.discarded += 1;
        }
    }
    Ok(c)
}

/// Applied over actionable.
pub fn actionable_to_applied(c: &FunnelCounts) -> Result<f64, FunnelError> {
    if c.actionable == 0 {
        return Err(FunnelError::ZeroDenominator);
    }
    Ok(c.applied as f64 / c.actionable as f64)
}

/// Applied over shown.
pub fn shown_to_applied(c: &FunnelCounts) -> Result<f64, FunnelError> {
    if c.shown == 0 {
        return Err(FunnelError::ZeroDenominator);
    }
    Ok(c.applied as f64 / c.shown as f64)
}
