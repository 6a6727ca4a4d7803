//! Model backends: a chat-completion HTTP client and a deterministic replay
//! store keyed by prompt fingerprint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("no replay entry for fingerprint {0}")]
    ReplayMiss(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("model endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed model response: {0}")]
    Malformed(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// A rendered prompt: system instruction plus user message.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Prompt {
            system: system.into(),
            user: user.into(),
        }
    }

    /// Full prompt text, system block first.
    pub fn text(&self) -> String {
        if self.system.is_empty() {
            self.user.clone()
        } else {
            format!("{}\n\n{}", self.system, self.user)
        }
    }

    /// Lowercase hex SHA-256 of [`Prompt::text`].
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.text().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            max_output_tokens: 2048,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Wall time reported by the backend. Replay reports the recorded value.
    pub latency_ms: u64,
}

/// One model invocation per call; no hidden sampling or reranking.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &Prompt, params: &CompletionParams) -> Result<Completion, BackendError>;

    fn model_id(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub fingerprint: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl ReplayEntry {
    pub fn new(prompt: &Prompt, response: impl Into<String>) -> Self {
        ReplayEntry {
            fingerprint: prompt.fingerprint(),
            response: response.into(),
            latency_ms: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ReplayLoadError {
    #[error("cannot read replay store: {0}")]
    Io(#[from] std::io::Error),
    #[error("replay store line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Canned responses keyed by prompt fingerprint. Unknown fingerprints are a
/// backend error.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    model_id: String,
    entries: HashMap<String, ReplayEntry>,
    calls: AtomicUsize,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        ReplayBackend {
            model_id: "replay".to_owned(),
            entries: entries.into_iter().map(|e| (e.fingerprint.clone(), e)).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn load(path: &Path) -> Result<Self, ReplayLoadError> {
        let text = fs::read_to_string(path)?;
        Ok(Self::from_entries(parse_replay_store(&text)?))
    }

    /// Number of `complete` calls served so far, hits and misses alike.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn parse_replay_store(text: &str) -> Result<Vec<ReplayEntry>, ReplayLoadError> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ReplayEntry = serde_json::from_str(line).map_err(|e| ReplayLoadError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Some(prev) = seen.insert(entry.fingerprint.clone(), i + 1) {
            return Err(ReplayLoadError::Parse {
                line: i + 1,
                reason: format!("fingerprint already defined on line {prev}"),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_replay_store(entries: &[ReplayEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("replay entry serializes"));
        out.push('\n');
    }
    out
}

impl Backend for ReplayBackend {
    fn complete(&self, prompt: &Prompt, _params: &CompletionParams) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fp = prompt.fingerprint();
        match self.entries.get(&fp) {
            Some(e) => Ok(Completion {
                text: e.response.clone(),
                latency_ms: e.latency_ms.unwrap_or(0),
            }),
            None => Err(BackendError::ReplayMiss(fp)),
        }
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    #[serde(default)]
    pub max_retries: u32,
}

fn default_timeout_s() -> u64 {
    60
}

/// Chat-completion client (`messages` in, `choices[0].message.content` out).
pub struct HttpBackend {
    config: HttpBackendConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { config, token, agent })
    }

    fn request_body(&self, prompt: &Prompt, params: &CompletionParams) -> serde_json::Value {
        let mut messages = Vec::new();
        if !prompt.system.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": prompt.system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": prompt.user}));
        serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
            "n": 1,
            "stream": false,
        })
    }

    fn call_once(&self, body: &serde_json::Value) -> Result<String, BackendError> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        extract_chat_content(&text)
    }
}

pub fn extract_chat_content(body: &str) -> Result<String, BackendError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_owned)
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &Prompt, params: &CompletionParams) -> Result<Completion, BackendError> {
        let body = self.request_body(prompt, params);
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            match self.call_once(&body) {
                Ok(text) => {
                    return Ok(Completion {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Err(e) if attempt < self.config.max_retries && retryable(&e) => {
                    attempt += 1;
                    tracing::warn!(attempt, error = %e, "retrying model call");
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Transport(_) => true,
        BackendError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    #[test]
    fn fingerprint_is_sha256_of_text() {
        let p = Prompt::new("sys", "user");
        assert_eq!(p.text(), "sys\n\nuser");
        // sha256("sys\n\nuser")
        assert_eq!(p.fingerprint().len(), 64);
        assert_eq!(p.fingerprint(), Prompt::new("sys", "user").fingerprint());
        assert_ne!(p.fingerprint(), Prompt::new("sys", "user ").fingerprint());
        assert_eq!(
            Prompt::new("", "abc").fingerprint(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn replay_hits_and_misses() {
        let p = Prompt::new("s", "u");
        let backend = ReplayBackend::from_entries(vec![ReplayEntry::new(&p, "hello")]);
        let params = CompletionParams::default();
        assert_eq!(backend.complete(&p, &params).unwrap().text, "hello");
        assert!(matches!(
            backend.complete(&Prompt::new("s", "other"), &params),
            Err(BackendError::ReplayMiss(_))
        ));
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn replay_store_round_trips_and_rejects_duplicates() {
        let entries = vec![
            ReplayEntry::new(&Prompt::new("", "a"), "x\ny"),
            ReplayEntry::new(&Prompt::new("", "b"), "z"),
        ];
        let text = write_replay_store(&entries);
        assert_eq!(parse_replay_store(&text).unwrap(), entries);
        let dup = format!("{text}{}", text.lines().next().unwrap());
        assert!(matches!(
            parse_replay_store(&dup),
            Err(ReplayLoadError::Parse { line: 3, .. })
        ));
        assert!(parse_replay_store("{not json").is_err());
    }

    /// Serves one canned HTTP response and hands back the request it saw.
    fn one_shot_server(status: u16, body: &'static str) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut content_length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body_buf = vec![0u8; content_length];
            reader.read_exact(&mut body_buf).unwrap();
            head.push_str(&String::from_utf8(body_buf).unwrap());
            tx.send(head).unwrap();
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        });
        (format!("http://{addr}/v1/chat/completions"), rx)
    }

    #[test]
    fn http_backend_speaks_chat_completions() {
        let (endpoint, seen) =
            one_shot_server(200, r#"{"choices":[{"message":{"role":"assistant","content":"yes"}}]}"#);
        std::env::set_var("CRFIX_TEST_TOKEN", "s3cret");
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint,
            model: "local-model".into(),
            auth_token_env: Some("CRFIX_TEST_TOKEN".into()),
            timeout_s: 5,
            max_retries: 0,
        })
        .unwrap();
        let out = backend
            .complete(&Prompt::new("be terse", "hi"), &CompletionParams::default())
            .unwrap();
        assert_eq!(out.text, "yes");
        let request = seen.recv().unwrap();
        assert!(request.starts_with("POST /v1/chat/completions"));
        assert!(request.contains("Bearer s3cret"));
        let body = &request[request.find("\r\n\r\n").unwrap() + 4..];
        let json: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(json["model"], "local-model");
        assert_eq!(json["messages"][0]["role"], "system");
        assert_eq!(json["messages"][1]["content"], "hi");
        assert_eq!(json["temperature"], 0.0);
    }

    #[test]
    fn http_backend_reports_status_errors() {
        let (endpoint, _seen) = one_shot_server(503, r#"{"error":"overloaded"}"#);
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint,
            model: "m".into(),
            auth_token_env: None,
            timeout_s: 5,
            max_retries: 0,
        })
        .unwrap();
        let err = backend
            .complete(&Prompt::new("", "hi"), &CompletionParams::default())
            .unwrap_err();
        assert!(matches!(err, BackendError::Status { status: 503, .. }), "{err}");
    }

    #[test]
    fn missing_token_variable_is_a_config_error() {
        let err = HttpBackend::new(HttpBackendConfig {
            endpoint: "http://127.0.0.1:9/".into(),
            model: "m".into(),
            auth_token_env: Some("CRFIX_DEFINITELY_UNSET_VAR".into()),
            timeout_s: 1,
            max_retries: 0,
        })
        .err()
        .unwrap();
        assert!(matches!(err, BackendError::Config(_)));
    }

    #[test]
    fn chat_content_extraction() {
        assert!(extract_chat_content("{}").is_err());
        assert!(extract_chat_content("nope").is_err());
        assert_eq!(
            extract_chat_content(r#"{"choices":[{"message":{"content":"a"}}]}"#).unwrap(),
            "a"
        );
    }
}
