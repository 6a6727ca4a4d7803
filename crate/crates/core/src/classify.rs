//! Comment actionability and ⟨comment, patch⟩ pair quality classifiers.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionParams, Prompt};
use crate::patch::{serialize_patch, LineDiffPatch, SourceFile};

/// An inline review comment anchored to a line range of one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewComment {
    pub id: String,
    pub diff_id: String,
    pub file_path: String,
    pub comment_text: String,
    pub line_start: usize,
    pub line_end: usize,
    pub author: String,
    /// Milliseconds since the Unix epoch, UTC.
    pub created_at: i64,
}

impl ReviewComment {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("comment id is empty".into());
        }
        if self.comment_text.trim().is_empty() {
            return Err("comment text is empty".into());
        }
        if self.line_start == 0 || self.line_start > self.line_end {
            return Err(format!(
                "invalid line range {}-{}",
                self.line_start, self.line_end
            ));
        }
        Ok(())
    }

    /// Validates the comment and checks its range fits `file`.
    pub fn validate_against(&self, file: &SourceFile) -> Result<(), String> {
        self.validate()?;
        if self.line_end > file.len() {
            return Err(format!(
                "line range {}-{} exceeds {}-line file {}",
                self.line_start,
                self.line_end,
                file.len(),
                file.path()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionabilityLabel {
    pub actionable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Good,
    Bad,
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("model backend failed: {0}")]
    Backend(#[from] BackendError),
    #[error("few-shot prompt needs at least one {0} exemplar")]
    InsufficientExemplars(&'static str),
    #[error("predictions ({predictions}) and gold labels ({gold}) differ in length")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("no labels to evaluate")]
    EmptyInput,
}

/// Decides whether a review comment asks for a code change.
pub trait ActionabilityClassifier: Send + Sync {
    fn classify(&self, comment: &ReviewComment, context: &[String]) -> Result<ActionabilityLabel, ClassifyError>;
}

/// Decides whether a ⟨comment, patch⟩ pair is fit for a training set.
pub trait PairQualityClassifier: Send + Sync {
    fn classify(
        &self,
        comment: &ReviewComment,
        patch: &LineDiffPatch,
        context: &SourceFile,
    ) -> Result<PairLabel, ClassifyError>;
}

pub const IMPERATIVE_CUES: [&str; 12] = [
    "rename", "add", "remove", "use", "replace", "extract", "move", "fix", "change", "make", "convert",
    "check",
];

/// Keyword baseline: an imperative cue or an inline code span, unless every
/// sentence is a question.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleActionability;

impl RuleActionability {
    pub fn label(text: &str) -> ActionabilityLabel {
        let (prose, has_code_span) = strip_code_spans(text);
        let cue = prose
            .split(|c: char| !c.is_alphanumeric())
            .map(str::to_lowercase)
            .find(|w| IMPERATIVE_CUES.contains(&w.as_str()));
        let interrogative = purely_interrogative(&prose);

        let actionable = (cue.is_some() || has_code_span) && !interrogative;
        let rationale = if interrogative {
            "every sentence is a question".to_owned()
        } else if let Some(w) = cue {
            format!("imperative cue `{w}`")
        } else if has_code_span {
            "inline code span".to_owned()
        } else {
            "no imperative cue or code span".to_owned()
        };
        ActionabilityLabel {
            actionable,
            rationale: Some(rationale),
        }
    }
}

impl ActionabilityClassifier for RuleActionability {
    fn classify(&self, comment: &ReviewComment, _context: &[String]) -> Result<ActionabilityLabel, ClassifyError> {
        Ok(Self::label(&comment.comment_text))
    }
}

/// Removes backtick-delimited spans, replacing each with a placeholder word.
fn strip_code_spans(text: &str) -> (String, bool) {
    let mut out = String::with_capacity(text.len());
    let mut found = false;
    let mut rest = text;
    while let Some(open) = rest.find('`') {
        let after = &rest[open + 1..];
        match after.find('`') {
            Some(close) if close > 0 => {
                out.push_str(&rest[..open]);
                out.push_str("CODE");
                found = true;
                rest = &after[close + 1..];
            }
            _ => {
                out.push_str(&rest[..=open]);
                rest = after;
            }
        }
    }
    out.push_str(rest);
    (out, found)
}

fn purely_interrogative(prose: &str) -> bool {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for c in prose.chars() {
        current.push(c);
        if matches!(c, '.' | '!' | '?' | '\n') {
            sentences.push(std::mem::take(&mut current));
        }
    }
    sentences.push(current);
    let sentences: Vec<&str> = sentences
        .iter()
        .map(|s| s.trim())
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .collect();
    !sentences.is_empty() && sentences.iter().all(|s| s.ends_with('?'))
}

/// Locality baseline: a non-empty patch whose hunks all sit within
/// `max_distance` lines of the commented range.
#[derive(Debug, Clone, Copy)]
pub struct RulePairQuality {
    pub max_distance: usize,
}

impl Default for RulePairQuality {
    fn default() -> Self {
        RulePairQuality { max_distance: 10 }
    }
}

impl RulePairQuality {
    pub fn label(&self, comment: &ReviewComment, patch: &LineDiffPatch) -> PairLabel {
        if patch.is_empty() {
            return PairLabel::Bad;
        }
        let lo = comment.line_start.saturating_sub(self.max_distance);
        let hi = comment.line_end + self.max_distance;
        let near = patch.hunks().iter().all(|h| {
            // An insertion occupies the gap before `start`.
            let (h_lo, h_hi) = if h.is_insertion() {
                (h.start, h.start)
            } else {
                (h.start, h.end)
            };
            h_hi >= lo && h_lo <= hi
        });
        if near {
            PairLabel::Good
        } else {
            PairLabel::Bad
        }
    }
}

impl PairQualityClassifier for RulePairQuality {
    fn classify(
        &self,
        comment: &ReviewComment,
        patch: &LineDiffPatch,
        _context: &SourceFile,
    ) -> Result<PairLabel, ClassifyError> {
        Ok(self.label(comment, patch))
    }
}

/// A labeled comment used as a few-shot exemplar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub comment: ReviewComment,
    #[serde(default)]
    pub context: String,
    pub label: bool,
}

const ACTIONABILITY_INSTRUCTION: &str = "You triage code review comments. A comment is actionable when \
it asks for a concrete code change that can be written as a patch. Questions, praise, and \
discussion are not actionable.";

/// Renders the few-shot actionability prompt. Exemplars appear in the order
/// given.
pub fn build_fewshot_prompt(
    exemplars: &[Exemplar],
    target: &ReviewComment,
    context: &[String],
) -> Result<Prompt, ClassifyError> {
    if !exemplars.iter().any(|e| e.label) {
        return Err(ClassifyError::InsufficientExemplars("actionable"));
    }
    if !exemplars.iter().any(|e| !e.label) {
        return Err(ClassifyError::InsufficientExemplars("non-actionable"));
    }

    let mut user = String::new();
    for (i, ex) in exemplars.iter().enumerate() {
        user.push_str(&format!("### Example {}\n", i + 1));
        push_comment_block(&mut user, &ex.comment.comment_text, &ex.context);
        user.push_str(&format!("Actionable: {}\n\n", if ex.label { "yes" } else { "no" }));
    }
    user.push_str("### Comment to classify\n");
    push_comment_block(&mut user, &target.comment_text, &context.join("\n"));
    user.push_str("Answer exactly `yes` or `no`.\nActionable:");

    Ok(Prompt::new(ACTIONABILITY_INSTRUCTION, user))
}

fn push_comment_block(out: &mut String, text: &str, context: &str) {
    out.push_str("Comment:\n");
    out.push_str(text);
    out.push('\n');
    if !context.is_empty() {
        out.push_str("Code:\n```\n");
        out.push_str(context);
        out.push_str("\n```\n");
    }
}

/// Reads the first word of a model answer as yes/no.
fn parse_yes_no(answer: &str) -> Option<bool> {
    let word: String = answer
        .trim_start()
        .trim_start_matches(['`', '"', '\'', '*'])
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect();
    match word.to_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn parse_good_bad(answer: &str) -> Option<PairLabel> {
    let word: String = answer
        .trim_start()
        .trim_start_matches(['`', '"', '\'', '*'])
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect();
    match word.to_lowercase().as_str() {
        "good" => Some(PairLabel::Good),
        "bad" => Some(PairLabel::Bad),
        _ => None,
    }
}

/// In-context-learning actionability classifier over a model backend.
pub struct ModelActionability {
    backend: Arc<dyn Backend>,
    exemplars: Vec<Exemplar>,
    params: CompletionParams,
}

impl ModelActionability {
    pub fn new(backend: Arc<dyn Backend>, exemplars: Vec<Exemplar>) -> Result<Self, ClassifyError> {
        if !exemplars.iter().any(|e| e.label) {
            return Err(ClassifyError::InsufficientExemplars("actionable"));
        }
        if !exemplars.iter().any(|e| !e.label) {
            return Err(ClassifyError::InsufficientExemplars("non-actionable"));
        }
        Ok(ModelActionability {
            backend,
            exemplars,
            params: CompletionParams {
                max_output_tokens: 8,
                temperature: 0.0,
            },
        })
    }
}

impl ActionabilityClassifier for ModelActionability {
    fn classify(&self, comment: &ReviewComment, context: &[String]) -> Result<ActionabilityLabel, ClassifyError> {
        let prompt = build_fewshot_prompt(&self.exemplars, comment, context)?;
        let completion = self.backend.complete(&prompt, &self.params)?;
        Ok(match parse_yes_no(&completion.text) {
            Some(actionable) => ActionabilityLabel {
                actionable,
                rationale: None,
            },
            None => ActionabilityLabel {
                actionable: false,
                rationale: Some(format!("unparseable model answer: {:?}", completion.text)),
            },
        })
    }
}

const PAIR_QUALITY_INSTRUCTION: &str = "You review training data for a code-fix model. A data point is \
good when the comment needs a code change, states clearly what to change, and the patch \
addresses it accurately. Otherwise it is bad.";

pub fn build_pair_quality_prompt(comment: &ReviewComment, patch: &LineDiffPatch, context: &SourceFile) -> Prompt {
    let mut user = String::new();
    user.push_str(&format!(
        "File: {}\nComment on lines {}-{}:\n{}\n\nCode:\n```\n",
        context.path(),
        comment.line_start,
        comment.line_end,
        comment.comment_text
    ));
    user.push_str(&context.excerpt(comment.line_start, comment.line_end).join("\n"));
    user.push_str("\n```\n\nPatch:\n```\n");
    user.push_str(&serialize_patch(patch));
    user.push_str("\n```\n\nAnswer exactly `good` or `bad`.\nQuality:");
    Prompt::new(PAIR_QUALITY_INSTRUCTION, user)
}

/// Model-backed pair quality classifier. Unparseable answers count as bad.
pub struct ModelPairQuality {
    backend: Arc<dyn Backend>,
    params: CompletionParams,
}

impl ModelPairQuality {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        ModelPairQuality {
            backend,
            params: CompletionParams {
                max_output_tokens: 8,
                temperature: 0.0,
            },
        }
    }
}

impl PairQualityClassifier for ModelPairQuality {
    fn classify(
        &self,
        comment: &ReviewComment,
        patch: &LineDiffPatch,
        context: &SourceFile,
    ) -> Result<PairLabel, ClassifyError> {
        let prompt = build_pair_quality_prompt(comment, patch, context);
        let completion = self.backend.complete(&prompt, &self.params)?;
        Ok(parse_good_bad(&completion.text).unwrap_or(PairLabel::Bad))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    /// Keyed by `"true"` (positive class) and `"false"`.
    pub per_class: BTreeMap<String, ClassScores>,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn class_scores(tp: u64, fp: u64, fn_: u64) -> ClassScores {
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    ClassScores {
        precision,
        recall,
        precision_undefined,
        recall_undefined,
    }
}

/// Binary classification metrics with `true` as the positive class. Zero
/// denominators report 0 and set the matching `*_undefined` flag.
pub fn eval_classifier(predictions: &[bool], gold: &[bool]) -> Result<ClassificationMetrics, ClassifyError> {
    if predictions.len() != gold.len() {
        return Err(ClassifyError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    if predictions.is_empty() {
        return Err(ClassifyError::EmptyInput);
    }

    let mut c = ConfusionCounts::default();
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }

    let positive = class_scores(c.tp, c.fp, c.fn_);
    let negative = class_scores(c.tn, c.fn_, c.fp);
    let (p, r) = (positive.precision, positive.recall);
    let f1_undefined = positive.precision_undefined || positive.recall_undefined || p + r == 0.0;
    let f1 = if f1_undefined { 0.0 } else { 2.0 * p * r / (p + r) };

    let mut per_class = BTreeMap::new();
    per_class.insert("true".to_owned(), positive);
    per_class.insert("false".to_owned(), negative);

    Ok(ClassificationMetrics {
        precision: p,
        recall: r,
        f1,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        precision_undefined: positive.precision_undefined,
        recall_undefined: positive.recall_undefined,
        f1_undefined,
        per_class,
        counts: c,
    })
}

/// One line of an actionability labeled set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledComment {
    pub comment: ReviewComment,
    #[serde(default)]
    pub context: String,
    pub label: bool,
}

/// One line of a pair-quality labeled set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub comment: ReviewComment,
    pub patch: LineDiffPatch,
    #[serde(default)]
    pub context: String,
    pub label: PairLabel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ReplayBackend, ReplayEntry};
    use crate::patch::{Hunk, LineDiffPatch};

    pub(crate) fn comment(text: &str, start: usize, end: usize) -> ReviewComment {
        ReviewComment {
            id: "c1".into(),
            diff_id: "D1".into(),
            file_path: "src/lib.rs".into(),
            comment_text: text.into(),
            line_start: start,
            line_end: end,
            author: "reviewer".into(),
            created_at: 0,
        }
    }

    fn exemplars() -> Vec<Exemplar> {
        vec![
            Exemplar {
                comment: comment("Please extract this into a helper.", 1, 1),
                context: "let a = b + c;".into(),
                label: true,
            },
            Exemplar {
                comment: comment("Nice work here!", 1, 1),
                context: String::new(),
                label: false,
            },
        ]
    }

    #[test]
    fn rule_baseline_examples() {
        assert!(!RuleActionability::label("Why did you choose this approach?").actionable);
        assert!(RuleActionability::label("Please rename `fooBar` to `foo_bar`").actionable);
        assert!(RuleActionability::label("`unwrap` here can panic").actionable);
        assert!(!RuleActionability::label("Looks good to me.").actionable);
        assert!(!RuleActionability::label("Could you rename this? Or use `x`?").actionable);
        assert!(RuleActionability::label("Is this needed? Remove it if not.").actionable);
        // Dots inside code spans do not split sentences.
        assert!(RuleActionability::label("Use `self.inner.len()` instead").actionable);
        // Cue words must be whole words.
        assert!(!RuleActionability::label("The address is stale.").actionable);
    }

    #[test]
    fn pair_rule_locality() {
        let c = comment("fix", 20, 22);
        let near = LineDiffPatch::new(vec![Hunk::new(12, 12, vec!["x".into()]), Hunk::new(30, 32, vec![])]).unwrap();
        assert_eq!(RulePairQuality::default().label(&c, &near), PairLabel::Good);
        let far = LineDiffPatch::new(vec![Hunk::new(21, 21, vec!["x".into()]), Hunk::new(40, 40, vec![])]).unwrap();
        assert_eq!(RulePairQuality::default().label(&c, &far), PairLabel::Bad);
        assert_eq!(RulePairQuality::default().label(&c, &LineDiffPatch::empty()), PairLabel::Bad);
    }

    #[test]
    fn fewshot_prompt_is_deterministic_and_complete() {
        let target = comment("Replace the loop with an iterator", 3, 4);
        let ctx = vec!["for i in 0..n {".to_owned(), "}".to_owned()];
        let a = build_fewshot_prompt(&exemplars(), &target, &ctx).unwrap();
        let b = build_fewshot_prompt(&exemplars(), &target, &ctx).unwrap();
        assert_eq!(a, b);
        let text = a.text();
        for needle in [
            "Please extract this into a helper.",
            "Nice work here!",
            "Replace the loop with an iterator",
        ] {
            assert_eq!(text.matches(needle).count(), 1, "{needle}");
        }
        assert!(text.contains("Answer exactly `yes` or `no`"));

        let only_negative = vec![exemplars().remove(1)];
        assert!(matches!(
            build_fewshot_prompt(&only_negative, &target, &ctx),
            Err(ClassifyError::InsufficientExemplars("actionable"))
        ));
    }

    #[test]
    fn model_classifier_uses_replay_answers() {
        let target = comment("Could this be simpler", 1, 1);
        let prompt = build_fewshot_prompt(&exemplars(), &target, &[]).unwrap();
        let backend = Arc::new(ReplayBackend::from_entries(vec![ReplayEntry::new(&prompt, "yes")]));
        let clf = ModelActionability::new(backend.clone(), exemplars()).unwrap();
        assert!(clf.classify(&target, &[]).unwrap().actionable);
        assert_eq!(backend.calls(), 1);

        let garbled = Arc::new(ReplayBackend::from_entries(vec![ReplayEntry::new(&prompt, "maybe?")]));
        let label = ModelActionability::new(garbled, exemplars())
            .unwrap()
            .classify(&target, &[])
            .unwrap();
        assert!(!label.actionable);
        assert!(label.rationale.unwrap().contains("maybe?"));

        let empty = Arc::new(ReplayBackend::from_entries(vec![]));
        let err = ModelActionability::new(empty, exemplars())
            .unwrap()
            .classify(&target, &[])
            .unwrap_err();
        assert!(matches!(err, ClassifyError::Backend(_)));
    }

    #[test]
    fn model_pair_quality_uses_replay_answers() {
        let c = comment("Rename it", 1, 1);
        let file = SourceFile::from_content("src/lib.rs", "let a = 1;").unwrap();
        let p = LineDiffPatch::new(vec![Hunk::new(1, 1, vec!["let b = 1;".into()])]).unwrap();
        let prompt = build_pair_quality_prompt(&c, &p, &file);
        let backend = Arc::new(ReplayBackend::from_entries(vec![ReplayEntry::new(&prompt, "good")]));
        assert_eq!(ModelPairQuality::new(backend).classify(&c, &p, &file).unwrap(), PairLabel::Good);
    }

    #[test]
    fn metrics_from_confusion_matrix() {
        // tp=3 fp=1 fn=1 tn=5
        let mut pred = vec![true, true, true, true, false];
        let mut gold = vec![true, true, true, false, true];
        pred.extend([false; 5]);
        gold.extend([false; 5]);
        let m = eval_classifier(&pred, &gold).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 5 });
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert_eq!(m.f1, 0.75);
        // (tp + tn) / total = 8 / 10
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.per_class["false"].precision, 5.0 / 6.0);
    }

    #[test]
    fn metrics_identity_and_undefined() {
        let m = eval_classifier(&[true; 4], &[true; 4]).unwrap();
        assert_eq!((m.precision, m.recall, m.accuracy), (1.0, 1.0, 1.0));

        let gold: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let m = eval_classifier(&[false; 10], &gold).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert!(m.precision_undefined);
        assert!(!m.recall_undefined);
        assert!(m.f1_undefined);

        assert!(matches!(eval_classifier(&[], &[]), Err(ClassifyError::EmptyInput)));
        assert!(matches!(
            eval_classifier(&[true], &[true, false]),
            Err(ClassifyError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn comment_validation() {
        let file = SourceFile::from_content("a", "x\ny").unwrap();
        assert!(comment("fix", 1, 2).validate_against(&file).is_ok());
        assert!(comment("fix", 2, 3).validate_against(&file).is_err());
        assert!(comment("fix", 0, 1).validate().is_err());
        assert!(comment("fix", 2, 1).validate().is_err());
        assert!(comment("  ", 1, 1).validate().is_err());
    }
}
