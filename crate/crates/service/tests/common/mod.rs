#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use crfix_core::backend::{ReplayBackend, ReplayEntry};
use crfix_core::classify::{ReviewComment, RuleActionability};
use crfix_core::generate::{build_patch_prompt, GenerationRequest};
use crfix_core::patch::{fence_patch, parse_patch_unbounded, SourceFile};
use crfix_core::validate::{CheckCategory, CheckConfig};
use crfix_service::config::{BackendConfig, ClassifierConfig, PipelineConfig};
use crfix_service::Service;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const CONTENT: &str = "def total(xs):\n    s = 0\n    for x in xs:\n        s += x\n    return s\n";
pub const PATCH: &str = "@@ 2 5 @@\n+    return sum(xs)";

pub fn file() -> SourceFile {
    SourceFile::from_content("pkg/calc.py", CONTENT).unwrap()
}

pub fn comment(id: &str, text: &str) -> ReviewComment {
    ReviewComment {
        id: id.into(),
        diff_id: "D100".into(),
        file_path: "pkg/calc.py".into(),
        comment_text: text.into(),
        line_start: 2,
        line_end: 5,
        author: "reviewer".into(),
        created_at: 0,
    }
}

pub const ACTIONABLE: &str = "Replace the loop with `sum(xs)`.";
pub const QUESTION: &str = "Why is this a loop?";

/// Replay entry answering `comment` on `file()` with `patch`.
pub fn entry(comment: &ReviewComment, response: &str) -> ReplayEntry {
    let request = GenerationRequest::new(comment.clone(), file()).unwrap();
    ReplayEntry::new(&build_patch_prompt(&request), response)
}

pub fn good_entry(comment: &ReviewComment) -> ReplayEntry {
    entry(comment, &fence_patch(&parse_patch_unbounded(PATCH).unwrap()))
}

pub fn check(name: &str, script: &str) -> CheckConfig {
    CheckConfig {
        name: name.into(),
        category: CheckCategory::Lint,
        argv: vec!["sh".into(), "-c".into(), script.into()],
        glob: "*.py".into(),
        workdir: PathBuf::from("."),
        timeout_s: 10,
        output_cap_bytes: 1024,
    }
}

pub fn config(dir: &Path, checks: Vec<CheckConfig>) -> PipelineConfig {
    PipelineConfig {
        backend: BackendConfig::Replay {
            replay_file: dir.join("replay.jsonl"),
            model_id: None,
        },
        classifier: ClassifierConfig::Rule,
        checks,
        max_inflight_generations: 2,
        max_parallel_workspaces: 2,
        event_log_path: dir.join("events.jsonl"),
        detect_applied_mode: Default::default(),
    }
}

pub fn start(config: &PipelineConfig, entries: Vec<ReplayEntry>) -> (Service, Arc<ReplayBackend>) {
    let backend = Arc::new(ReplayBackend::from_entries(entries).with_model_id("replay-test"));
    let (svc, corruption) = Service::with_parts(config, backend.clone(), Arc::new(RuleActionability)).unwrap();
    assert!(corruption.is_none(), "{corruption:?}");
    (svc, backend)
}

pub fn comment_body(c: &ReviewComment, f: &SourceFile) -> Value {
    json!({
        "id": c.id,
        "diff_id": c.diff_id,
        "file_path": c.file_path,
        "comment_text": c.comment_text,
        "line_start": c.line_start,
        "line_end": c.line_end,
        "author": c.author,
        "created_at": c.created_at,
        "file": {"path": f.path(), "content": f.content()},
    })
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body)).await
}

pub fn event_kinds(svc: &Service, comment_id: &str) -> Vec<String> {
    svc.projection()
        .events()
        .iter()
        .filter(|e| e.comment_id == comment_id)
        .map(|e| serde_json::to_value(e.kind).unwrap().as_str().unwrap().to_owned())
        .collect()
}
