//! Training-set curation: ingest mined ⟨comment, patch⟩ pairs, accept them
//! by human annotation or a quality classifier, and export prompt/completion
//! lines.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{ClassifyError, PairLabel, PairQualityClassifier, ReviewComment};
use crate::generate::{build_patch_prompt, GenerationRequest};
use crate::patch::{apply_patch, serialize_patch, LineDiffPatch, SourceFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Mined,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub actionability: bool,
    pub instruction_quality: bool,
    pub accuracy: bool,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub id: String,
    pub comment: ReviewComment,
    pub patch: LineDiffPatch,
    pub context: SourceFile,
    pub source: PairSource,
    #[serde(default = "default_true")]
    pub validators_passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationStats {
    pub ingested: u64,
    pub rejected_at_ingest: u64,
    pub human_labeled: u64,
    pub human_accepted: u64,
    pub classifier_labeled: u64,
    pub classifier_accepted: u64,
    pub exported: u64,
}

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ingest line {line_no}: {reason}")]
    Ingest { line_no: usize, reason: String },
    #[error("pair {0} has no annotation")]
    Unannotated(String),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    InvalidComment,
    ApplyError,
    ValidatorsFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line_no: usize,
    pub id: String,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ingested {
    pub pairs: Vec<CandidatePair>,
    pub rejected: Vec<Rejection>,
}

impl Ingested {
    pub fn ingested(&self) -> u64 {
        (self.pairs.len() + self.rejected.len()) as u64
    }
}

pub fn ingest_pairs(path: &Path) -> Result<Ingested, CurationError> {
    let text = fs::read_to_string(path).map_err(|source| CurationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pairs(&text)
}

/// Parses pair lines. Malformed lines and duplicate ids abort; pairs that
/// parse but cannot be used are set aside with a reason.
pub fn parse_pairs(text: &str) -> Result<Ingested, CurationError> {
    let mut out = Ingested::default();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let pair: CandidatePair = serde_json::from_str(line).map_err(|e| CurationError::Ingest {
            line_no,
            reason: e.to_string(),
        })?;
        if !ids.insert(pair.id.clone()) {
            return Err(CurationError::Ingest {
                line_no,
                reason: format!("duplicate id {:?}", pair.id),
            });
        }
        let reject = |reason, detail: String| Rejection {
            line_no,
            id: pair.id.clone(),
            reason,
            detail,
        };
        if let Err(e) = pair.comment.validate_against(&pair.context) {
            out.rejected.push(reject(RejectReason::InvalidComment, e));
        } else if let Err(e) = apply_patch(&pair.context, &pair.patch) {
            out.rejected.push(reject(RejectReason::ApplyError, e.to_string()));
        } else if !pair.validators_passed {
            out.rejected.push(reject(RejectReason::ValidatorsFailed, "diff failed a lint, test or build".into()));
        } else {
            out.pairs.push(pair);
        }
    }
    Ok(out)
}

/// A pair enters the dataset only when all three annotated properties hold.
pub fn accept_human(pair: &CandidatePair) -> Result<bool, CurationError> {
    let a = pair
        .annotation
        .as_ref()
        .ok_or_else(|| CurationError::Unannotated(pair.id.clone()))?;
    Ok(a.actionability && a.instruction_quality && a.accuracy)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub accepted: Vec<CandidatePair>,
    pub rejected: Vec<CandidatePair>,
    pub stats: CurationStats,
}

/// Splits `pairs` by classifier verdict. A backend failure aborts the batch.
pub fn filter_with_classifier(
    pairs: &[CandidatePair],
    classifier: &dyn PairQualityClassifier,
) -> Result<Partition, CurationError> {
    let mut out = Partition::default();
    for pair in pairs {
        match classifier.classify(&pair.comment, &pair.patch, &pair.context)? {
            PairLabel::Good => out.accepted.push(pair.clone()),
            PairLabel::Bad => out.rejected.push(pair.clone()),
        }
    }
    out.stats.classifier_labeled = pairs.len() as u64;
    out.stats.classifier_accepted = out.accepted.len() as u64;
    Ok(out)
}

/// Annotated pairs take the human route; the rest go to the classifier.
pub fn curate(ingested: &Ingested, classifier: &dyn PairQualityClassifier) -> Result<Partition, CurationError> {
    let (human, unlabeled): (Vec<&CandidatePair>, Vec<&CandidatePair>) =
        ingested.pairs.iter().partition(|p| p.annotation.is_some());

    let mut out = Partition::default();
    for p in &human {
        if accept_human(p)? {
            out.accepted.push((*p).clone());
        } else {
            out.rejected.push((*p).clone());
        }
    }
    let human_accepted = out.accepted.len() as u64;

    let unlabeled: Vec<CandidatePair> = unlabeled.into_iter().cloned().collect();
    let by_model = filter_with_classifier(&unlabeled, classifier)?;
    out.accepted.extend(by_model.accepted);
    out.rejected.extend(by_model.rejected);

    out.stats = CurationStats {
        ingested: ingested.ingested(),
        rejected_at_ingest: ingested.rejected.len() as u64,
        human_labeled: human.len() as u64,
        human_accepted,
        classifier_labeled: by_model.stats.classifier_labeled,
        classifier_accepted: by_model.stats.classifier_accepted,
        exported: out.accepted.len() as u64,
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
}

pub fn sft_record(pair: &CandidatePair) -> SftRecord {
    let request = GenerationRequest::new(pair.comment.clone(), pair.context.clone())
        .expect("ingest validated the comment against its context");
    SftRecord {
        prompt: build_patch_prompt(&request).text(),
        completion: serialize_patch(&pair.patch),
    }
}

/// Renders SFT lines in input order.
pub fn render_sft(pairs: &[CandidatePair]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(&sft_record(p)).expect("record serializes") + "\n")
        .collect()
}

/// Writes SFT lines to `path`. Human and classifier counts in the returned
/// stats come from the pairs' annotations.
pub fn export_sft(pairs: &[CandidatePair], path: &Path) -> Result<CurationStats, CurationError> {
    let io_err = |source| CurationError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(render_sft(pairs).as_bytes()).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;

    let human = pairs.iter().filter(|p| p.annotation.is_some()).count() as u64;
    let n = pairs.len() as u64;
    Ok(CurationStats {
        ingested: n,
        rejected_at_ingest: 0,
        human_labeled: human,
        human_accepted: human,
        classifier_labeled: n - human,
        classifier_accepted: n - human,
        exported: n,
    })
}

pub fn write_pairs(pairs: &[CandidatePair]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("pair serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::RulePairQuality;
    use crate::patch::Hunk;

    pub(crate) fn pair(id: &str, hunk: Option<Hunk>, annotation: Option<(bool, bool, bool)>) -> CandidatePair {
        let context = SourceFile::from_content("m.py", &(1..=30).map(|i| format!("line{i}")).collect::<Vec<_>>().join("\n")).unwrap();
        CandidatePair {
            id: id.into(),
            comment: ReviewComment {
                id: format!("c-{id}"),
                diff_id: "D9".into(),
                file_path: "m.py".into(),
                comment_text: "fix this".into(),
                line_start: 10,
                line_end: 11,
                author: "rev".into(),
                created_at: 0,
            },
            patch: LineDiffPatch::new(hunk.into_iter().collect()).unwrap(),
            context,
            source: PairSource::Mined,
            validators_passed: true,
            annotation: annotation.map(|(a, b, c)| Annotation {
                actionability: a,
                instruction_quality: b,
                accuracy: c,
                annotator: "ann".into(),
            }),
        }
    }

    fn near() -> Option<Hunk> {
        Some(Hunk::new(10, 10, vec!["fixed".into()]))
    }

    #[test]
    fn ingest_sorts_out_unusable_pairs() {
        let mut far = pair("p3", Some(Hunk::new(99, 99, vec![])), None);
        far.patch = crate::patch::parse_patch_unbounded("@@ 99 99 @@").unwrap();
        let mut failed = pair("p4", near(), None);
        failed.validators_passed = false;
        let text = write_pairs(&[pair("p1", near(), None), pair("p2", near(), None), far, failed]);
        let ing = parse_pairs(&text).unwrap();
        assert_eq!(ing.pairs.len(), 2);
        assert_eq!(ing.rejected.len(), 2);
        assert_eq!(ing.rejected[0].reason, RejectReason::ApplyError);
        assert_eq!(ing.rejected[1].reason, RejectReason::ValidatorsFailed);
        assert_eq!(ing.ingested(), 4);

        let dup = write_pairs(&[pair("p1", near(), None), pair("p1", near(), None)]);
        assert!(matches!(parse_pairs(&dup), Err(CurationError::Ingest { line_no: 2, .. })));
    }

    #[test]
    fn human_acceptance_is_a_conjunction() {
        assert!(accept_human(&pair("a", near(), Some((true, true, true)))).unwrap());
        assert!(!accept_human(&pair("a", near(), Some((true, false, true)))).unwrap());
        assert!(matches!(accept_human(&pair("a", near(), None)), Err(CurationError::Unannotated(_))));
    }

    #[test]
    fn classifier_partition() {
        let pairs = vec![pair("a", near(), None), pair("b", near(), None)];
        let part = filter_with_classifier(&pairs, &RulePairQuality::default()).unwrap();
        assert_eq!(part.accepted.len(), 2);
        let empties = vec![pair("a", None, None), pair("b", None, None)];
        let part = filter_with_classifier(&empties, &RulePairQuality::default()).unwrap();
        assert_eq!(part.rejected.len(), 2);
        assert_eq!(part.stats.classifier_accepted, 0);
    }

    #[test]
    fn curate_routes_and_counts() {
        let text = write_pairs(&[
            pair("h1", near(), Some((true, true, true))),
            pair("h2", near(), Some((true, true, false))),
            pair("m1", near(), None),
            pair("m2", None, None),
        ]);
        let ing = parse_pairs(&text).unwrap();
        let part = curate(&ing, &RulePairQuality::default()).unwrap();
        let ids: Vec<&str> = part.accepted.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["h1", "m1"]);
        assert_eq!(part.stats.human_labeled, 2);
        assert_eq!(part.stats.human_accepted, 1);
        assert_eq!(part.stats.classifier_labeled, 2);
        assert_eq!(part.stats.classifier_accepted, 1);
    }

    #[test]
    fn export_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![
            pair("a", near(), Some((true, true, true))),
            pair("b", near(), None),
            pair("c", near(), None),
        ];
        let out = dir.path().join("sft.jsonl");
        let stats = export_sft(&pairs, &out).unwrap();
        assert_eq!(stats.exported, 3);
        assert_eq!(stats.human_accepted + stats.classifier_accepted, 3);
        let first = fs::read(&out).unwrap();
        assert_eq!(String::from_utf8_lossy(&first).lines().count(), 3);
        export_sft(&pairs, &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), first);

        let rec: SftRecord = serde_json::from_str(String::from_utf8_lossy(&first).lines().next().unwrap()).unwrap();
        assert_eq!(rec.completion, "@@ 10 10 @@\n+fixed");
        assert!(rec.prompt.contains("10: line10"));

        let empty = dir.path().join("empty.jsonl");
        assert_eq!(export_sft(&[], &empty).unwrap().exported, 0);
        assert!(fs::read(&empty).unwrap().is_empty());
    }
}
