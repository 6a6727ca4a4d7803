//! Patch generation: prompt assembly, one model call, fenced-patch parsing
//! and a trial apply.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, CompletionParams, Prompt};
use crate::classify::ReviewComment;
use crate::patch::{apply_patch, extract_fenced, parse_patch_unbounded, LineDiffPatch, SourceFile, PATCH_CLOSE, PATCH_OPEN};

pub const DEFAULT_SYSTEM_INSTRUCTION: &str = "You are a senior engineer resolving code review comments. \
Edit only what the comment asks for and keep the surrounding code unchanged.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub comment: ReviewComment,
    pub file: SourceFile,
    pub system_instruction: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid generation request: {0}")]
pub struct InvalidRequest(pub String);

impl GenerationRequest {
    pub fn new(comment: ReviewComment, file: SourceFile) -> Result<Self, InvalidRequest> {
        comment.validate_against(&file).map_err(InvalidRequest)?;
        Ok(GenerationRequest {
            comment,
            file,
            system_instruction: DEFAULT_SYSTEM_INSTRUCTION.to_owned(),
            max_output_tokens: 2048,
            temperature: 0.0,
        })
    }

    fn params(&self) -> CompletionParams {
        CompletionParams {
            max_output_tokens: self.max_output_tokens,
            temperature: self.temperature,
        }
    }
}

pub fn build_patch_prompt(request: &GenerationRequest) -> Prompt {
    let c = &request.comment;
    let mut user = String::new();
    user.push_str(&format!(
        "Address the review comment below by editing the file.\n\n\
         Reply with a patch in line-diff format between a line `{PATCH_OPEN}` and a line `{PATCH_CLOSE}`.\n\
         Each hunk starts with a header `@@ <start> <end> @@` naming the first and last original \
         line it replaces (1-based, inclusive), followed by the replacement lines, each prefixed \
         with `+`. Use `@@ <n> <n-1> @@` to insert before line n, and a header with no `+` lines \
         to delete. Hunks must be in ascending order and must not overlap. Line numbers refer to \
         the original file.\n\n"
    ));
    user.push_str(&format!("File: {}\n", request.file.path()));
    for (i, line) in request.file.lines().iter().enumerate() {
        user.push_str(&format!("{}: {}\n", i + 1, line));
    }
    user.push_str(&format!(
        "\nReview comment on lines {}-{}:\n{}\n",
        c.line_start, c.line_end, c.comment_text
    ));
    Prompt::new(request.system_instruction.clone(), user)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Ok,
    ModelError,
    ParseError,
    ApplyError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub status: OutcomeStatus,
    pub patch: Option<LineDiffPatch>,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub latency_ms: u64,
}

impl GenerationOutcome {
    fn failed(status: OutcomeStatus, raw_response: String, detail: String, latency_ms: u64) -> Self {
        GenerationOutcome {
            status,
            patch: None,
            raw_response,
            detail: Some(detail),
            latency_ms,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == OutcomeStatus::Ok
    }
}

/// Makes exactly one model call and classifies the result.
pub fn generate_patch(backend: &dyn Backend, request: &GenerationRequest) -> GenerationOutcome {
    let prompt = build_patch_prompt(request);
    let completion = match backend.complete(&prompt, &request.params()) {
        Ok(c) => c,
        Err(e) => return GenerationOutcome::failed(OutcomeStatus::ModelError, String::new(), e.to_string(), 0),
    };
    let raw = completion.text;
    let latency = completion.latency_ms;

    let Some(body) = extract_fenced(&raw) else {
        return GenerationOutcome::failed(OutcomeStatus::ParseError, raw, "no fenced patch block".into(), latency);
    };
    let patch = match parse_patch_unbounded(&body) {
        Ok(p) => p,
        Err(e) => return GenerationOutcome::failed(OutcomeStatus::ParseError, raw, e.to_string(), latency),
    };
    if let Err(e) = apply_patch(&request.file, &patch) {
        return GenerationOutcome::failed(OutcomeStatus::ApplyError, raw, e.to_string(), latency);
    }
    GenerationOutcome {
        status: OutcomeStatus::Ok,
        patch: Some(patch),
        raw_response: raw,
        detail: None,
        latency_ms: latency,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no outcomes to aggregate")]
pub struct EmptyInput;

/// Share of outcomes that produced an applicable patch.
pub fn spg_rate(outcomes: &[GenerationOutcome]) -> Result<f64, EmptyInput> {
    if outcomes.is_empty() {
        return Err(EmptyInput);
    }
    let ok = outcomes.iter().filter(|o| o.is_ok()).count();
    Ok(ok as f64 / outcomes.len() as f64)
}
