//! Safety-trial and rollout analysis over funnel events and review-time
//! samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::funnel::{funnel_counts, EventKind, FunnelCounts, FunnelEvent, TimeWindow};
use crate::stats::{assign_arm, fisher_exact_two_sided, welch_t_test, Arm, ContingencyTable, StatsError, TestResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SafetyTrial,
    FullRollout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyMetric {
    TimeInReview,
    TimeSpent,
    WallClock,
}

impl SafetyMetric {
    pub fn label(&self) -> &'static str {
        match self {
            SafetyMetric::TimeInReview => "TimeInReview",
            SafetyMetric::TimeSpent => "TimeSpent",
            SafetyMetric::WallClock => "WallClock",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMetric {
    ActionableToApplied,
    ShownToApplied,
}

impl GoalMetric {
    pub fn label(&self) -> &'static str {
        match self {
            GoalMetric::ActionableToApplied => "ActionableToApplied",
            GoalMetric::ShownToApplied => "ShownToApplied",
        }
    }

    /// (applied, denominator) for this metric.
    fn fraction(&self, c: &FunnelCounts) -> (u64, u64) {
        match self {
            GoalMetric::ActionableToApplied => (c.applied, c.actionable),
            GoalMetric::ShownToApplied => (c.applied, c.shown),
        }
    }
}

/// A named cohort window for rollout comparisons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Era {
    pub label: String,
    pub from: i64,
    pub to: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub salt: String,
    pub split_fraction: f64,
    #[serde(default)]
    pub goal_metrics: Vec<GoalMetric>,
    #[serde(default)]
    pub safety_metrics: Vec<SafetyMetric>,
    #[serde(default)]
    pub regression_threshold_pct: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Consecutive eras compared pairwise in a full rollout.
    #[serde(default)]
    pub eras: Vec<Era>,
}

fn default_alpha() -> f64 {
    0.05
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(StatsError::InvalidSpec(format!(
                "split_fraction must be in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(StatsError::InvalidSpec(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !self.regression_threshold_pct.is_finite() {
            return Err(StatsError::InvalidSpec("regression_threshold_pct must be finite".into()));
        }
        for era in &self.eras {
            if era.from >= era.to {
                return Err(StatsError::InvalidSpec(format!("era {:?} is empty", era.label)));
            }
        }
        Ok(())
    }

    pub fn assign(&self, unit_id: &str) -> Result<Arm, StatsError> {
        assign_arm(unit_id, &self.salt, self.split_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub unit_id: String,
    pub metric: SafetyMetric,
    pub value: f64,
    pub arm: Arm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyOutcome {
    pub metric: SafetyMetric,
    pub result: Option<TestResult>,
    pub error: Option<String>,
    pub regression: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalOutcome {
    pub metric: GoalMetric,
    pub control_label: String,
    pub test_label: String,
    pub control_rate: Option<f64>,
    pub test_rate: Option<f64>,
    pub table: ContingencyTable,
    pub result: Option<TestResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Safe,
    Unsafe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: ExperimentKind,
    pub alpha: f64,
    pub safety: Vec<SafetyOutcome>,
    pub goals: Vec<GoalOutcome>,
    pub verdict: Verdict,
}

/// Unit of assignment for a comment: its diff id when the receipt event
/// carries one, else the comment id.
fn unit_of(e: &FunnelEvent) -> String {
    e.payload
        .get("comment")
        .and_then(|c| c.get("diff_id"))
        .or_else(|| e.payload.get("diff_id"))
        .and_then(|v| v.as_str())
        .map(str::to_owned)
        .unwrap_or_else(|| e.comment_id.clone())
}

pub fn analyze_experiment(
    spec: &ExperimentSpec,
    events: &[FunnelEvent],
    samples: &[MetricSample],
) -> Result<ExperimentReport, StatsError> {
    spec.validate()?;
    if spec.kind == ExperimentKind::SafetyTrial {
        for s in samples {
            let expected = spec.assign(&s.unit_id)?;
            if expected != s.arm {
                return Err(StatsError::InconsistentAssignment {
                    unit_id: s.unit_id.clone(),
                    tagged: s.arm,
                    expected,
                });
            }
        }
    }

    let safety: Vec<SafetyOutcome> = spec
        .safety_metrics
        .iter()
        .map(|&metric| safety_outcome(spec, metric, samples))
        .collect();

    let goals = match spec.kind {
        ExperimentKind::SafetyTrial => {
            let (control, test) = split_events_by_arm(spec, events)?;
            let control_counts = counts_or_error(&control);
            let test_counts = counts_or_error(&test);
            spec.goal_metrics
                .iter()
                .map(|&m| goal_outcome(m, ("control", &control_counts), ("test", &test_counts)))
                .collect()
        }
        ExperimentKind::FullRollout => {
            let mut out = Vec::new();
            let era_counts: Vec<(String, Result<FunnelCounts, String>)> = spec
                .eras
                .iter()
                .map(|e| {
                    let c = funnel_counts(events, TimeWindow::new(e.from, e.to)).map_err(|err| err.to_string());
                    (e.label.clone(), c)
                })
                .collect();
            for pair in era_counts.windows(2) {
                for &m in &spec.goal_metrics {
                    out.push(goal_outcome(m, (&pair[0].0, &pair[0].1), (&pair[1].0, &pair[1].1)));
                }
            }
            out
        }
    };

    let verdict = if safety.iter().any(|s| s.regression) {
        Verdict::Unsafe
    } else {
        Verdict::Safe
    };
    Ok(ExperimentReport {
        name: spec.name.clone(),
        kind: spec.kind,
        alpha: spec.alpha,
        safety,
        goals,
        verdict,
    })
}

fn safety_outcome(spec: &ExperimentSpec, metric: SafetyMetric, samples: &[MetricSample]) -> SafetyOutcome {
    let values = |arm: Arm| -> Vec<f64> {
        samples
            .iter()
            .filter(|s| s.metric == metric && s.arm == arm)
            .map(|s| s.value)
            .collect()
    };
    let invalid = samples
        .iter()
        .find(|s| s.metric == metric && !(s.value.is_finite() && s.value >= 0.0));
    let result = match invalid {
        Some(s) => Err(StatsError::InvalidValue(s.value)),
        None => welch_t_test(&values(Arm::Control), &values(Arm::Test)),
    };
    match result {
        Ok(r) => {
            let regression = r.delta_pct.is_some_and(|d| d > spec.regression_threshold_pct) && r.p_value < spec.alpha;
            SafetyOutcome {
                metric,
                result: Some(r),
                error: None,
                regression,
            }
        }
        Err(e) => SafetyOutcome {
            metric,
            result: None,
            error: Some(e.to_string()),
            regression: false,
        },
    }
}

fn split_events_by_arm(
    spec: &ExperimentSpec,
    events: &[FunnelEvent],
) -> Result<(Vec<FunnelEvent>, Vec<FunnelEvent>), StatsError> {
    let mut arm_of: BTreeMap<&str, Arm> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::CommentReceived) {
        if !arm_of.contains_key(e.comment_id.as_str()) {
            arm_of.insert(&e.comment_id, spec.assign(&unit_of(e))?);
        }
    }
    let test_comments: BTreeSet<&str> = arm_of
        .iter()
        .filter(|(_, a)| **a == Arm::Test)
        .map(|(c, _)| *c)
        .collect();
    let (test, control): (Vec<FunnelEvent>, Vec<FunnelEvent>) = events
        .iter()
        .cloned()
        .partition(|e| test_comments.contains(e.comment_id.as_str()));
    Ok((control, test))
}

fn counts_or_error(events: &[FunnelEvent]) -> Result<FunnelCounts, String> {
    funnel_counts(events, TimeWindow::ALL).map_err(|e| e.to_string())
}

fn goal_outcome(
    metric: GoalMetric,
    control: (&str, &Result<FunnelCounts, String>),
    test: (&str, &Result<FunnelCounts, String>),
) -> GoalOutcome {
    let mut out = GoalOutcome {
        metric,
        control_label: control.0.to_owned(),
        test_label: test.0.to_owned(),
        control_rate: None,
        test_rate: None,
        table: ContingencyTable::new(0, 0, 0, 0),
        result: None,
        error: None,
    };
    let (c, t) = match (control.1, test.1) {
        (Ok(c), Ok(t)) => (c, t),
        (Err(e), _) | (_, Err(e)) => {
            out.error = Some(e.clone());
            return out;
        }
    };
    let (c_hit, c_den) = metric.fraction(c);
    let (t_hit, t_den) = metric.fraction(t);
    out.control_rate = (c_den > 0).then(|| c_hit as f64 / c_den as f64);
    out.test_rate = (t_den > 0).then(|| t_hit as f64 / t_den as f64);
    out.table = ContingencyTable::new(t_hit, t_den - t_hit, c_hit, c_den - c_hit);
    match fisher_exact_two_sided(&out.table) {
        Ok(r) => out.result = Some(r),
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

fn format_p(p: f64) -> String {
    if p < 0.001 {
        "p < .001".to_owned()
    } else {
        let s = format!("{p:.3}");
        format!("p = {}", s.strip_prefix('0').unwrap_or(&s))
    }
}

/// Plain-text summary: one row per safety metric (percent change and p),
/// then one row per goal comparison.
pub fn render_experiment_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Experiment: {} ({:?})", report.name, report.kind);
    if !report.safety.is_empty() {
        let _ = writeln!(out, "{:<16} {:>22}  flag", "Safety metric", "change, p");
        for s in &report.safety {
            let cell = match (&s.result, &s.error) {
                (Some(r), _) => format!("{:.2}%, {}", r.delta_pct.unwrap_or(f64::NAN), format_p(r.p_value)),
                (None, Some(e)) => format!("n/a ({e})"),
                (None, None) => "n/a".to_owned(),
            };
            let flag = if s.regression { "REGRESSION" } else { "" };
            let _ = writeln!(out, "{:<16} {:>22}  {}", s.metric.label(), cell, flag);
        }
    }
    if !report.goals.is_empty() {
        let _ = writeln!(out, "{:<20} {:>24} {:>10} {:>10}  p", "Goal metric", "comparison", "control", "test");
        for g in &report.goals {
            let rate = |r: Option<f64>| r.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "n/a".into());
            let p = match (&g.result, &g.error) {
                (Some(r), _) => format_p(r.p_value),
                (None, Some(e)) => format!("n/a ({e})"),
                (None, None) => "n/a".to_owned(),
            };
            let _ = writeln!(
                out,
                "{:<20} {:>24} {:>10} {:>10}  {}",
                g.metric.label(),
                format!("{} vs {}", g.test_label, g.control_label),
                rate(g.control_rate),
                rate(g.test_rate),
                p
            );
        }
    }
    let _ = writeln!(out, "Verdict: {:?}", report.verdict);
    out
}
