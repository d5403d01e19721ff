use std::path::{Path, PathBuf};

use mmds_core::adapters::{BackendConfig, BackendKind};
use mmds_core::retrieval::RetrievalConfig;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Overrides [`EngineConfig::listen`].
pub const LISTEN_ENV: &str = "MMDS_LISTEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    #[default]
    Centroid,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Reference,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssessKind {
    #[default]
    Rules,
    Adapter,
}

/// One backend per model call site.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSet {
    /// QA generation at ingest, MCQ answering and the assess step.
    pub generation: BackendConfig,
    /// Department labels for generated pairs; also the adapter scorer.
    pub classification: BackendConfig,
    pub routing: BackendConfig,
    pub report: BackendConfig,
    pub frame_analysis: BackendConfig,
}

impl BackendSet {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &BackendConfig)> {
        [
            ("generation", &self.generation),
            ("classification", &self.classification),
            ("routing", &self.routing),
            ("report", &self.report),
            ("frame_analysis", &self.frame_analysis),
        ]
        .into_iter()
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut BackendConfig> {
        [&mut self.generation, &mut self.classification, &mut self.routing, &mut self.report, &mut self.frame_analysis].into_iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Department list (TOML); the built-in taxonomy when absent.
    pub taxonomy: Option<PathBuf>,
    /// Directory of prompt template overrides.
    pub templates_dir: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub listen: String,
    pub embedding_dim: usize,
    /// Thread cap for frame analysis and evaluation.
    pub workers: usize,
    /// `/eval/run` datasets larger than this run in the background.
    pub eval_async_threshold: usize,
    pub router: RouterKind,
    pub scorer: ScorerKind,
    pub assess: AssessKind,
    pub min_tokens: usize,
    pub history_budget: usize,
    pub video_summarize_with_backend: bool,
    pub retrieval: RetrievalConfig,
    pub backends: BackendSet,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            taxonomy: None,
            templates_dir: None,
            data_dir: PathBuf::from("mmds-data"),
            listen: "127.0.0.1:8080".into(),
            embedding_dim: mmds_core::DEFAULT_DIM,
            workers: 4,
            eval_async_threshold: 500,
            router: RouterKind::Centroid,
            scorer: ScorerKind::Reference,
            assess: AssessKind::Rules,
            min_tokens: mmds_core::agent::DEFAULT_MIN_TOKENS,
            history_budget: mmds_core::agent::DEFAULT_HISTORY_BUDGET,
            video_summarize_with_backend: false,
            retrieval: RetrievalConfig::default(),
            backends: BackendSet::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ApiError> {
        toml::from_str(text).map_err(|e| ApiError::bad_request(format!("config: {e}")))
    }

    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ApiError> {
        let text = std::fs::read_to_string(path).map_err(|e| ApiError::bad_request(format!("config {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.taxonomy.as_mut().map(fix);
        self.templates_dir.as_mut().map(fix);
        fix(&mut self.data_dir);
        for backend in self.backends.iter_mut() {
            backend.script.as_mut().map(fix);
        }
    }

    /// Applies [`LISTEN_ENV`] and the backend endpoint/token variables.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(listen) = lookup(LISTEN_ENV).filter(|v| !v.is_empty()) {
            self.listen = listen;
        }
        for backend in self.backends.iter_mut() {
            backend.apply_env(&lookup);
        }
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        let bad = |m: String| Err(ApiError::bad_request(m));
        if let Some(p) = &self.taxonomy {
            if !p.is_file() {
                return bad(format!("taxonomy file not found: {}", p.display()));
            }
        }
        if let Some(p) = &self.templates_dir {
            if !p.is_dir() {
                return bad(format!("templates directory not found: {}", p.display()));
            }
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.listen.trim().is_empty() {
            return bad("listen address is empty".into());
        }
        self.retrieval.validate().map_err(|e| ApiError::bad_request(format!("retrieval: {e}")))?;
        for (site, backend) in self.backends.iter() {
            backend.validate().map_err(|e| ApiError::bad_request(format!("backend {site}: {e}")))?;
            if backend.kind == BackendKind::Mock {
                if let Some(p) = backend.script.as_ref().filter(|p| !p.is_file()) {
                    return bad(format!("backend {site}: script not found: {}", p.display()));
                }
            }
        }
        Ok(())
    }
}
