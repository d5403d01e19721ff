//! Model-backend contract and its implementations.
//!
//! Every model call in the engine goes through [`Backend`]: chat completion,
//! embedding, pairwise scoring, transcription and image description. The
//! deterministic [`MockBackend`] answers from an [`AdapterScript`]; the
//! [`HttpBackend`] speaks the chat-completions JSON shape.

mod config;
mod http;
mod script;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::embed::{cosine, reference_embed};
use crate::templates::{CallSite, PromptTemplates};
use crate::text;

pub use config::{BackendConfig, BackendKind, ENDPOINT_ENV, TOKEN_ENV};
pub use http::{HttpBackend, HttpRequest, HttpTransport, TransportError, UreqTransport};
pub use script::{AdapterScript, MockBackend, ScriptEntry};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("backend returned an empty reply")]
    EmptyReply,
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid label set: {0}")]
    InvalidLabels(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("invalid script pattern `{pattern}`: {source}")]
    InvalidPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("script file: {0}")]
    ScriptFormat(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Output of a transcription call. Degraded output carries a warning rather
/// than failing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Audio handle: either an already known transcript or a media file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioRef {
    #[serde(default)]
    pub transcript: Option<String>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, AdapterError>;

    fn embed(&self, text: &str) -> Result<Vec<f64>, AdapterError>;

    /// Relevance of `document` to `query`, nominally in `[0, 1]`.
    fn score_pair(&self, query: &str, document: &str) -> Result<f64, AdapterError>;

    fn transcribe(&self, audio: &Path) -> Result<Transcript, AdapterError>;

    /// Chat turn about a single image file.
    fn describe_image(&self, image: &Path, messages: &[ChatMessage]) -> Result<String, AdapterError>;
}

/// Checks the conversation shape: non-empty, non-blank contents, system
/// messages only at the front, then strictly alternating user/assistant,
/// ending on a user turn.
pub fn validate_conversation(messages: &[ChatMessage]) -> Result<(), AdapterError> {
    if messages.is_empty() || messages.iter().any(|m| m.content.trim().is_empty()) {
        return Err(AdapterError::EmptyPrompt);
    }
    let body: Vec<&ChatMessage> = messages.iter().skip_while(|m| m.role == Role::System).collect();
    let mut expected = Role::User;
    for msg in &body {
        if msg.role != expected {
            return Err(AdapterError::InvalidConversation(format!(
                "expected {expected:?} turn, found {:?}",
                msg.role
            )));
        }
        expected = if expected == Role::User { Role::Assistant } else { Role::User };
    }
    match body.last() {
        Some(last) if last.role == Role::User => Ok(()),
        _ => Err(AdapterError::InvalidConversation("last message must be a user turn".into())),
    }
}

/// Validated chat call. The reply is guaranteed non-empty.
pub fn chat_complete(messages: &[ChatMessage], backend: &dyn Backend) -> Result<String, AdapterError> {
    validate_conversation(messages)?;
    let reply = backend.chat(messages)?;
    if reply.trim().is_empty() {
        return Err(AdapterError::EmptyReply);
    }
    Ok(reply)
}

/// System + user conversation built from a template.
pub fn templated_prompt(templates: &PromptTemplates, site: CallSite, vars: &[(&str, &str)]) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(templates.render(CallSite::System, &[])),
        ChatMessage::user(templates.render(site, vars)),
    ]
}

/// Asks the backend to pick one of `labels`. The result is always a member of
/// `labels`; replies naming no label fall back to the label whose reference
/// embedding is closest to the text.
pub fn classify_label(
    text: &str,
    labels: &[String],
    backend: &dyn Backend,
    templates: &PromptTemplates,
) -> Result<String, AdapterError> {
    classify_label_with_references(text, labels, labels, backend, templates)
}

/// As [`classify_label`], with a separate reference text per label for the
/// embedding fallback (e.g. a display name for a short id).
pub fn classify_label_with_references(
    text: &str,
    labels: &[String],
    references: &[String],
    backend: &dyn Backend,
    templates: &PromptTemplates,
) -> Result<String, AdapterError> {
    check_labels(labels)?;
    if references.len() != labels.len() {
        return Err(AdapterError::InvalidLabels("one reference text per label required".into()));
    }
    if labels.len() == 1 {
        return Ok(labels[0].clone());
    }
    let listing = labels
        .iter()
        .zip(references)
        .map(|(l, r)| if l == r { l.clone() } else { format!("{l} ({r})") })
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = templated_prompt(templates, CallSite::Classify, &[("labels", &listing), ("text", text)]);
    let reply = chat_complete(&prompt, backend)?;
    if let Some(idx) = match_label(&reply, labels).or_else(|| match_label(&reply, references)) {
        return Ok(labels[idx].clone());
    }
    Ok(labels[nearest_reference(text, references)].clone())
}

fn check_labels(labels: &[String]) -> Result<(), AdapterError> {
    if labels.is_empty() {
        return Err(AdapterError::InvalidLabels("no labels".into()));
    }
    for (i, label) in labels.iter().enumerate() {
        if labels[..i].contains(label) {
            return Err(AdapterError::InvalidLabels(format!("duplicate label `{label}`")));
        }
    }
    Ok(())
}

/// Index of the label named in `reply`: an exact (normalized) match first,
/// otherwise the label whose token sequence occurs earliest in the reply.
/// Equal positions prefer the longer label, then the earlier one.
pub fn match_label(reply: &str, labels: &[String]) -> Option<usize> {
    let normalized = text::normalize(reply);
    if let Some(idx) = labels.iter().position(|l| text::normalize(l) == normalized) {
        return Some(idx);
    }
    let reply_tokens = text::tokens(reply);
    let mut best: Option<(usize, usize, usize)> = None; // (position, -len, index)
    for (idx, label) in labels.iter().enumerate() {
        let label_tokens = text::tokens(label);
        if label_tokens.is_empty() || label_tokens.len() > reply_tokens.len() {
            continue;
        }
        let found = reply_tokens
            .windows(label_tokens.len())
            .position(|w| w == label_tokens.as_slice());
        if let Some(pos) = found {
            let key = (pos, usize::MAX - label_tokens.len(), idx);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    best.map(|(_, _, idx)| idx)
}

/// Position of the reference text with the highest cosine to `text`, first
/// position on ties. Texts that cannot be embedded score below everything.
pub fn nearest_reference(text: &str, references: &[String]) -> usize {
    let Ok(query) = reference_embed::<f64>(text, crate::DEFAULT_DIM) else {
        return 0;
    };
    let mut best = (0usize, f64::NEG_INFINITY);
    for (idx, reference) in references.iter().enumerate() {
        let score = reference_embed::<f64>(reference, crate::DEFAULT_DIM)
            .map(|v| cosine(&query, &v))
            .unwrap_or(f64::NEG_INFINITY);
        if score > best.1 {
            best = (idx, score);
        }
    }
    best.0
}

/// Returns a provided transcript unchanged, otherwise delegates to the
/// backend. A handle with neither transcript nor media yields empty text
/// with a warning.
pub fn transcribe(audio: &AudioRef, backend: &dyn Backend) -> Transcript {
    if let Some(text) = &audio.transcript {
        return Transcript { text: text.clone(), warning: None };
    }
    let Some(path) = &audio.path else {
        return Transcript { text: String::new(), warning: Some("no transcript or media provided".into()) };
    };
    match backend.transcribe(path) {
        Ok(t) => t,
        Err(err) => Transcript { text: String::new(), warning: Some(format!("transcription failed: {err}")) },
    }
}
