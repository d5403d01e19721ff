use std::fs;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};
use thiserror::Error;

use super::{AdapterError, Backend, BackendConfig, ChatMessage, Role, Transcript};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("http status {0}")]
    Status(u16),
    #[error("unreadable response body: {0}")]
    Body(String),
}

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub url: String,
    pub body: Value,
    pub bearer: Option<String>,
    pub timeout: Duration,
}

/// JSON-over-HTTP POST. Swappable so tests can count or fail requests.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, request: &HttpRequest) -> Result<Value, TransportError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(&self, request: &HttpRequest) -> Result<Value, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(request.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        let mut builder = agent.post(&request.url);
        if let Some(token) = &request.bearer {
            builder = builder.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = builder.send_json(&request.body).map_err(map_ureq_error)?;
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| TransportError::Body(e.to_string()))
    }
}

fn map_ureq_error(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::StatusCode(code) => TransportError::Status(code),
        ureq::Error::Timeout(_) => TransportError::Timeout,
        other => TransportError::Connection(other.to_string()),
    }
}

/// Counting semaphore bounding concurrent requests to one backend.
#[derive(Debug)]
struct InFlightGate {
    cap: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct GateGuard<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(cap: usize) -> Self {
        Self { cap: cap.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut active = self.active.lock().expect("gate poisoned");
        while *active >= self.cap {
            active = self.freed.wait(active).expect("gate poisoned");
        }
        *active += 1;
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("gate poisoned");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for chat-completions style services.
///
/// Paths are appended to the configured endpoint: `/chat/completions`,
/// `/embeddings`, `/rerank` and `/audio/transcriptions`.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    timeout: Duration,
    max_retries: u32,
    token: Option<String>,
    transport: Arc<dyn HttpTransport>,
    gate: InFlightGate,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("max_retries", &self.max_retries)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(
        config: &BackendConfig,
        transport: Arc<dyn HttpTransport>,
        token: Option<String>,
    ) -> Result<Self, AdapterError> {
        config.validate()?;
        let endpoint = config.endpoint.clone().unwrap_or_default();
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            model: config.model_name.clone(),
            timeout: Duration::from_secs_f64(config.timeout_s),
            max_retries: config.max_retries,
            token,
            transport,
            gate: InFlightGate::new(config.max_in_flight),
        })
    }

    /// At most `1 + max_retries` transport calls.
    fn post(&self, path: &str, body: Value) -> Result<Value, AdapterError> {
        let request = HttpRequest {
            url: format!("{}{}", self.endpoint, path),
            body,
            bearer: self.token.clone(),
            timeout: self.timeout,
        };
        let _slot = self.gate.enter();
        let attempts = 1 + self.max_retries;
        let mut last = None;
        for attempt in 0..attempts {
            match self.transport.post_json(&request) {
                Ok(value) => return Ok(value),
                Err(err) => {
                    log::warn!("{} attempt {}/{} failed: {err}", request.url, attempt + 1, attempts);
                    last = Some(err);
                }
            }
        }
        Err(AdapterError::BackendUnavailable {
            attempts,
            reason: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    fn message_json(messages: &[ChatMessage]) -> Vec<Value> {
        messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect()
    }

    fn first_choice(value: &Value) -> Result<String, AdapterError> {
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| AdapterError::MalformedResponse("missing choices[0].message.content".into()))
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.model
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, AdapterError> {
        let body = json!({ "model": self.model, "messages": Self::message_json(messages) });
        Self::first_choice(&self.post("/chat/completions", body)?)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, AdapterError> {
        let value = self.post("/embeddings", json!({ "model": self.model, "input": text }))?;
        value
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| AdapterError::MalformedResponse("missing data[0].embedding".into()))
    }

    fn score_pair(&self, query: &str, document: &str) -> Result<f64, AdapterError> {
        let body = json!({ "model": self.model, "query": query, "documents": [document] });
        let value = self.post("/rerank", body)?;
        value
            .pointer("/results/0/relevance_score")
            .and_then(Value::as_f64)
            .ok_or_else(|| AdapterError::MalformedResponse("missing results[0].relevance_score".into()))
    }

    fn transcribe(&self, audio: &Path) -> Result<Transcript, AdapterError> {
        let body = json!({ "model": self.model, "file": audio.display().to_string() });
        let value = self.post("/audio/transcriptions", body)?;
        let text = value
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| AdapterError::MalformedResponse("missing text".into()))?;
        Ok(Transcript { text: text.to_owned(), warning: None })
    }

    fn describe_image(&self, image: &Path, messages: &[ChatMessage]) -> Result<String, AdapterError> {
        let bytes = fs::read(image)?;
        let mime = match image.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => "image/png",
            Some("webp") => "image/webp",
            _ => "image/jpeg",
        };
        let data_url = format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes));
        let mut payload = Self::message_json(messages);
        if let Some(last) = payload.last_mut() {
            let text = last["content"].clone();
            last["content"] = json!([
                { "type": "text", "text": text },
                { "type": "image_url", "image_url": { "url": data_url } }
            ]);
        }
        let body = json!({ "model": self.model, "messages": payload });
        Self::first_choice(&self.post("/chat/completions", body)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{chat_complete, transcribe, AudioRef, BackendKind};
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Counts requests; fails the first `failures` of them.
    struct CountingTransport {
        calls: AtomicUsize,
        failures: usize,
        reply: Value,
        last_url: Mutex<String>,
    }

    impl CountingTransport {
        fn new(failures: usize, reply: Value) -> Arc<Self> {
            Arc::new(Self { calls: AtomicUsize::new(0), failures, reply, last_url: Mutex::new(String::new()) })
        }
    }

    impl HttpTransport for CountingTransport {
        fn post_json(&self, request: &HttpRequest) -> Result<Value, TransportError> {
            *self.last_url.lock().unwrap() = request.url.clone();
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(TransportError::Connection("refused".into()))
            } else {
                Ok(self.reply.clone())
            }
        }
    }

    fn config(retries: u32) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint: Some("http://backend.local/v1/".into()),
            max_retries: retries,
            ..BackendConfig::default()
        }
    }

    fn chat_reply(text: &str) -> Value {
        json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] })
    }

    #[test]
    fn retry_bound_on_persistent_failure() {
        for retries in 0..4 {
            let transport = CountingTransport::new(usize::MAX, Value::Null);
            let backend = HttpBackend::new(&config(retries), transport.clone(), None).unwrap();
            let err = chat_complete(&[ChatMessage::user("hi")], &backend).unwrap_err();
            assert!(matches!(err, AdapterError::BackendUnavailable { attempts, .. } if attempts == retries + 1));
            assert_eq!(transport.calls.load(Ordering::SeqCst), retries as usize + 1);
        }
    }

    #[test]
    fn succeeds_after_transient_failures() {
        let transport = CountingTransport::new(2, chat_reply("fine"));
        let backend = HttpBackend::new(&config(2), transport.clone(), None).unwrap();
        assert_eq!(chat_complete(&[ChatMessage::user("hi")], &backend).unwrap(), "fine");
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
        assert_eq!(*transport.last_url.lock().unwrap(), "http://backend.local/v1/chat/completions");
    }

    #[test]
    fn malformed_reply_is_an_error() {
        let transport = CountingTransport::new(0, json!({ "unexpected": true }));
        let backend = HttpBackend::new(&config(0), transport, None).unwrap();
        assert!(matches!(backend.chat(&[ChatMessage::user("x")]), Err(AdapterError::MalformedResponse(_))));
    }

    #[test]
    fn transcription_delegates_to_backend() {
        let transport = CountingTransport::new(0, json!({ "text": "my eye will not close" }));
        let backend = HttpBackend::new(&config(0), transport.clone(), None).unwrap();
        let handle = AudioRef { transcript: None, path: Some("visit.wav".into()) };
        let t = transcribe(&handle, &backend);
        assert_eq!(t.text, "my eye will not close");
        assert!(t.warning.is_none());
        assert!(transport.last_url.lock().unwrap().ends_with("/audio/transcriptions"));
    }

    #[test]
    fn embed_and_score_parse() {
        let transport = CountingTransport::new(0, json!({ "data": [{ "embedding": [0.6, 0.8] }] }));
        let backend = HttpBackend::new(&config(0), transport, None).unwrap();
        assert_eq!(backend.embed("x").unwrap(), vec![0.6, 0.8]);

        let transport = CountingTransport::new(0, json!({ "results": [{ "index": 0, "relevance_score": 0.25 }] }));
        let backend = HttpBackend::new(&config(0), transport, None).unwrap();
        assert_eq!(backend.score_pair("q", "d").unwrap(), 0.25);
    }

    #[test]
    fn in_flight_cap_is_respected() {
        use std::sync::atomic::AtomicUsize;
        struct SlowTransport {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl HttpTransport for SlowTransport {
            fn post_json(&self, _: &HttpRequest) -> Result<Value, TransportError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok(chat_reply("ok"))
            }
        }
        let transport = Arc::new(SlowTransport { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let mut cfg = config(0);
        cfg.max_in_flight = 2;
        let backend = HttpBackend::new(&cfg, transport.clone(), None).unwrap();
        std::thread::scope(|s| {
            for _ in 0..6 {
                s.spawn(|| backend.chat(&[ChatMessage::user("x")]).unwrap());
            }
        });
        assert!(transport.peak.load(Ordering::SeqCst) <= 2);
    }
}
