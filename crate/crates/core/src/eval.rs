//! Offline benchmark evaluation: Exact Match and Successful Patch Generation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, ReplayEntry};
use crate::classify::ReviewComment;
use crate::generate::{build_patch_prompt, generate_patch, GenerationRequest, OutcomeStatus};
use crate::patch::{apply_patch, diff_files, exact_match, fence_patch, SourceFile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub id: String,
    pub file_path: String,
    pub original_content: String,
    pub comment_text: String,
    pub line_start: usize,
    pub line_end: usize,
    pub ground_truth_content: String,
    /// Marks a case whose expected answer leaves the file unchanged.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub identity_case: bool,
}

impl BenchmarkCase {
    pub fn original(&self) -> SourceFile {
        SourceFile::from_content(&self.file_path, &self.original_content).expect("validated at load")
    }

    pub fn ground_truth(&self) -> SourceFile {
        SourceFile::from_content(&self.file_path, &self.ground_truth_content).expect("validated at load")
    }

    pub fn comment(&self) -> ReviewComment {
        ReviewComment {
            id: self.id.clone(),
            diff_id: self.id.clone(),
            file_path: self.file_path.clone(),
            comment_text: self.comment_text.clone(),
            line_start: self.line_start,
            line_end: self.line_end,
            author: "benchmark".to_owned(),
            created_at: 0,
        }
    }

    pub fn request(&self) -> GenerationRequest {
        GenerationRequest::new(self.comment(), self.original()).expect("validated at load")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        let original = SourceFile::from_content(&self.file_path, &self.original_content).map_err(|e| e.to_string())?;
        let truth = SourceFile::from_content(&self.file_path, &self.ground_truth_content).map_err(|e| e.to_string())?;
        self.comment().validate_against(&original)?;
        if !self.identity_case && exact_match(&original, &truth) {
            return Err("ground truth equals the original file; set identity_case to allow this".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line_no}: {reason}")]
    Parse { line_no: usize, reason: String },
    #[error("duplicate case id {id:?} on line {line_no}")]
    DuplicateId { id: String, line_no: usize },
    #[error("corpus is empty")]
    Empty,
}

pub fn load_corpus(path: &Path) -> Result<Vec<BenchmarkCase>, CorpusError> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn parse_corpus(text: &str) -> Result<Vec<BenchmarkCase>, CorpusError> {
    let mut ids = HashSet::new();
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let case: BenchmarkCase = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line_no,
            reason: e.to_string(),
        })?;
        case.validate().map_err(|reason| CorpusError::Parse { line_no, reason })?;
        if !ids.insert(case.id.clone()) {
            return Err(CorpusError::DuplicateId { id: case.id, line_no });
        }
        cases.push(case);
    }
    Ok(cases)
}

pub fn write_corpus(cases: &[BenchmarkCase]) -> String {
    cases
        .iter()
        .map(|c| serde_json::to_string(c).expect("case serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub outcome_status: OutcomeStatus,
    pub em: bool,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub n_cases: usize,
    pub em_rate: f64,
    pub spg_rate: f64,
    pub per_case: Vec<CaseResult>,
}

fn evaluate_case(backend: &dyn Backend, case: &BenchmarkCase) -> CaseResult {
    let request = case.request();
    let outcome = generate_patch(backend, &request);
    let em = match (&outcome.status, &outcome.patch) {
        (OutcomeStatus::Ok, Some(patch)) => apply_patch(&request.file, patch)
            .map(|patched| exact_match(&patched, &case.ground_truth()))
            .unwrap_or(false),
        _ => false,
    };
    CaseResult {
        case_id: case.id.clone(),
        outcome_status: outcome.status,
        em,
        latency_ms: outcome.latency_ms,
        detail: outcome.detail,
    }
}

/// Runs every case once on a pool of `parallelism` threads. Per-case
/// results are sorted by case id, so the report does not depend on
/// scheduling.
pub fn run_eval(backend: &dyn Backend, corpus: &[BenchmarkCase], parallelism: usize) -> Result<EvalReport, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool builds");
    let mut per_case: Vec<CaseResult> = pool.install(|| corpus.par_iter().map(|c| evaluate_case(backend, c)).collect());
    per_case.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let n = per_case.len();
    let ok = per_case.iter().filter(|c| c.outcome_status == OutcomeStatus::Ok).count();
    let em = per_case.iter().filter(|c| c.em).count();
    Ok(EvalReport {
        model_id: backend.model_id().to_owned(),
        n_cases: n,
        em_rate: em as f64 / n as f64,
        spg_rate: ok as f64 / n as f64,
        per_case,
    })
}

/// Replay entries answering every case with its ground-truth patch. Cases
/// that render the same prompt share one entry.
pub fn ground_truth_replay(corpus: &[BenchmarkCase]) -> Vec<ReplayEntry> {
    let mut seen = HashSet::new();
    corpus
        .iter()
        .map(|c| {
            let patch = diff_files(&c.original(), &c.ground_truth());
            ReplayEntry::new(&build_patch_prompt(&c.request()), fence_patch(&patch))
        })
        .filter(|e| seen.insert(e.fingerprint.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

/// Published offline results, shown for orientation only.
pub const REFERENCE_ROWS: [(&str, f64, f64); 3] = [
    ("GPT-4o", 59.22, 97.57),
    ("SmallLSFT", 63.11, 97.09),
    ("LargeLSFT", 67.96, 99.51),
];

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Table => {
            let mut out = String::new();
            let _ = writeln!(out, "{:<28} {:>6} {:>8} {:>8}", "model", "n", "EM%", "SPG%");
            let _ = writeln!(
                out,
                "{:<28} {:>6} {:>8.2} {:>8.2}",
                report.model_id,
                report.n_cases,
                100.0 * report.em_rate,
                100.0 * report.spg_rate
            );
            for (model, em, spg) in REFERENCE_ROWS {
                let _ = writeln!(
                    out,
                    "{:<28} {:>6} {:>8.2} {:>8.2}",
                    format!("reference: {model}"),
                    "-",
                    em,
                    spg
                );
            }
            let mut failures: Vec<&CaseResult> = report
                .per_case
                .iter()
                .filter(|c| c.outcome_status != OutcomeStatus::Ok)
                .collect();
            failures.sort_by(|a, b| a.outcome_status.cmp(&b.outcome_status).then(a.case_id.cmp(&b.case_id)));
            for f in failures {
                let _ = writeln!(out, "  {} {:?}", f.case_id, f.outcome_status);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReplayBackend;

    fn case(id: &str) -> BenchmarkCase {
        BenchmarkCase {
            id: id.into(),
            file_path: "a.py".into(),
            original_content: "x = 1\ny = x\n".into(),
            comment_text: "rename x".into(),
            line_start: 1,
            line_end: 2,
            ground_truth_content: "count = 1\ny = count\n".into(),
            identity_case: false,
        }
    }

    #[test]
    fn corpus_validation() {
        let text = write_corpus(&[case("a"), case("b"), case("c")]);
        assert_eq!(parse_corpus(&text).unwrap().len(), 3);

        let mut bad = case("d");
        bad.line_end = 9;
        let err = parse_corpus(&write_corpus(&[case("a"), bad])).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line_no: 2, .. }), "{err}");

        let err = parse_corpus(&write_corpus(&[case("a"), case("a")])).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { .. }));

        let mut same = case("e");
        same.ground_truth_content = same.original_content.clone();
        assert!(parse_corpus(&write_corpus(&[same.clone()])).is_err());
        same.identity_case = true;
        assert!(parse_corpus(&write_corpus(&[same])).is_ok());
    }

    #[test]
    fn oracle_backend_scores_perfectly() {
        let corpus = vec![case("a"), case("b")];
        let backend = ReplayBackend::from_entries(ground_truth_replay(&corpus));
        let report = run_eval(&backend, &corpus, 2).unwrap();
        assert_eq!((report.em_rate, report.spg_rate), (1.0, 1.0));
        assert_eq!(report.per_case[0].case_id, "a");
    }

    #[test]
    fn rendering() {
        let report = EvalReport {
            model_id: "m".into(),
            n_cases: 2,
            em_rate: 0.5,
            spg_rate: 1.0,
            per_case: vec![],
        };
        let table = render_report(&report, ReportFormat::Table);
        assert!(table.contains("50.00") && table.contains("100.00"), "{table}");
        let json = render_report(&report, ReportFormat::Json);
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(render_report(&back, ReportFormat::Json), json);
    }
}
