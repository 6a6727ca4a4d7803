//! Service configuration, read from a TOML file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crfix_core::backend::{Backend, HttpBackend, HttpBackendConfig, ReplayBackend};
use crfix_core::classify::{ActionabilityClassifier, Exemplar, ModelActionability, RuleActionability};
use crfix_core::patch::DetectMode;
use crfix_core::validate::CheckConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Replay {
        replay_file: PathBuf,
        #[serde(default)]
        model_id: Option<String>,
    },
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierConfig {
    #[default]
    Rule,
    /// Few-shot classifier on the pipeline backend; `exemplars` is a JSONL
    /// file of labeled comments.
    Model { exemplars: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub checks: Vec<CheckConfig>,
    #[serde(default = "default_inflight")]
    pub max_inflight_generations: usize,
    #[serde(default = "default_workspaces")]
    pub max_parallel_workspaces: usize,
    pub event_log_path: PathBuf,
    #[serde(default)]
    pub detect_applied_mode: DetectMode,
}

fn default_inflight() -> usize {
    4
}

fn default_workspaces() -> usize {
    2
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            config.resolve_relative(dir);
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Resolves relative file paths against `base`.
    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.event_log_path);
        if let BackendConfig::Replay { replay_file, .. } = &mut self.backend {
            fix(replay_file);
        }
        if let ClassifierConfig::Model { exemplars } = &mut self.classifier {
            fix(exemplars);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_inflight_generations == 0 {
            return Err(ConfigError::Invalid("max_inflight_generations must be at least 1".into()));
        }
        if self.max_parallel_workspaces == 0 {
            return Err(ConfigError::Invalid("max_parallel_workspaces must be at least 1".into()));
        }
        if self.event_log_path.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("event_log_path is empty".into()));
        }
        match &self.backend {
            BackendConfig::Replay { replay_file, .. } if replay_file.as_os_str().is_empty() => {
                return Err(ConfigError::Invalid("backend.replay_file is empty".into()));
            }
            BackendConfig::Http(h) if h.endpoint.is_empty() || h.model.is_empty() => {
                return Err(ConfigError::Invalid("backend.endpoint and backend.model are required".into()));
            }
            _ => {}
        }
        // Surfaces bad globs and empty argv at startup.
        crfix_core::validate::select_checks(&self.checks, "")
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for c in &self.checks {
            if c.argv.is_empty() || c.timeout_s == 0 {
                return Err(ConfigError::Invalid(format!(
                    "check {:?} needs a non-empty argv and a positive timeout",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn build_backend(&self) -> anyhow::Result<Arc<dyn Backend>> {
        Ok(match &self.backend {
            BackendConfig::Replay { replay_file, model_id } => {
                let mut b = ReplayBackend::load(replay_file)?;
                if let Some(id) = model_id {
                    b = b.with_model_id(id.clone());
                }
                Arc::new(b)
            }
            BackendConfig::Http(h) => Arc::new(HttpBackend::new(h.clone())?),
        })
    }

    pub fn build_classifier(&self, backend: Arc<dyn Backend>) -> anyhow::Result<Arc<dyn ActionabilityClassifier>> {
        Ok(match &self.classifier {
            ClassifierConfig::Rule => Arc::new(RuleActionability),
            ClassifierConfig::Model { exemplars } => {
                let text = fs::read_to_string(exemplars)?;
                let mut list = Vec::new();
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let ex: Exemplar = serde_json::from_str(line)
                        .map_err(|e| anyhow::anyhow!("{}:{}: {e}", exemplars.display(), i + 1))?;
                    list.push(ex);
                }
                Arc::new(ModelActionability::new(backend, list)?)
            }
        })
    }
}
