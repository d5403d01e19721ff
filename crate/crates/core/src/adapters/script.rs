use std::fs;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use super::{AdapterError, Backend, ChatMessage, Transcript};
use crate::retrieval::embed::reference_embed;
use crate::retrieval::rerank::token_f1;

/// One scripted rule: a case-insensitive regular expression over the prompt
/// text and the reply returned when it matches.
#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pattern: String,
    matcher: Regex,
    pub response: String,
}

impl ScriptEntry {
    pub fn new(pattern: &str, response: impl Into<String>) -> Result<Self, AdapterError> {
        let matcher = RegexBuilder::new(pattern)
            .case_insensitive(true)
            .build()
            .map_err(|source| AdapterError::InvalidPattern { pattern: pattern.to_owned(), source })?;
        Ok(Self { pattern: pattern.to_owned(), matcher, response: response.into() })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn matches(&self, prompt: &str) -> bool {
        self.matcher.is_match(prompt)
    }
}

#[derive(Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    entries: Vec<ScriptFileEntry>,
    default_response: String,
}

#[derive(Serialize, Deserialize)]
struct ScriptFileEntry {
    pattern: String,
    response: String,
}

/// Ordered reply rules for the mock backend; the first matching entry wins.
#[derive(Debug, Clone)]
pub struct AdapterScript {
    pub entries: Vec<ScriptEntry>,
    pub default_response: String,
}

impl AdapterScript {
    pub fn new(default_response: impl Into<String>) -> Self {
        Self { entries: Vec::new(), default_response: default_response.into() }
    }

    pub fn with(mut self, pattern: &str, response: impl Into<String>) -> Result<Self, AdapterError> {
        self.entries.push(ScriptEntry::new(pattern, response)?);
        Ok(self)
    }

    /// Parses `{"entries": [{"pattern", "response"}], "default_response"}`.
    pub fn from_json(json: &str) -> Result<Self, AdapterError> {
        let file: ScriptFile = serde_json::from_str(json)?;
        let mut script = Self::new(file.default_response);
        for entry in file.entries {
            script = script.with(&entry.pattern, entry.response)?;
        }
        Ok(script)
    }

    pub fn from_file(path: &Path) -> Result<Self, AdapterError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = ScriptFile {
            entries: self
                .entries
                .iter()
                .map(|e| ScriptFileEntry { pattern: e.pattern.clone(), response: e.response.clone() })
                .collect(),
            default_response: self.default_response.clone(),
        };
        serde_json::to_string(&file).expect("script serializes")
    }

    pub fn respond(&self, prompt: &str) -> &str {
        self.entries
            .iter()
            .find(|e| e.matches(prompt))
            .map(|e| e.response.as_str())
            .unwrap_or(&self.default_response)
    }
}

/// Deterministic backend: every verb is a pure function of its inputs and
/// the script.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: AdapterScript,
    dim: usize,
}

impl MockBackend {
    pub fn new(script: AdapterScript) -> Self {
        Self { script, dim: crate::DEFAULT_DIM }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn script(&self) -> &AdapterScript {
        &self.script
    }

    fn prompt_text(messages: &[ChatMessage]) -> String {
        messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, AdapterError> {
        Ok(self.script.respond(&Self::prompt_text(messages)).to_owned())
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, AdapterError> {
        reference_embed::<f64>(text, self.dim)
            .map(|v| v.values().to_vec())
            .map_err(|e| AdapterError::MalformedResponse(e.to_string()))
    }

    fn score_pair(&self, query: &str, document: &str) -> Result<f64, AdapterError> {
        Ok(token_f1::<f64>(query, document))
    }

    fn transcribe(&self, _audio: &Path) -> Result<Transcript, AdapterError> {
        Ok(Transcript { text: String::new(), warning: Some("speech recognition is stubbed in the mock backend".into()) })
    }

    fn describe_image(&self, image: &Path, messages: &[ChatMessage]) -> Result<String, AdapterError> {
        let prompt = format!("[image: {}]\n{}", image.display(), Self::prompt_text(messages));
        Ok(self.script.respond(&prompt).to_owned())
    }
}
