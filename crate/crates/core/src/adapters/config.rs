use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AdapterError, AdapterScript, Backend, HttpBackend, MockBackend, UreqTransport};

/// Overrides the endpoint of every http backend.
pub const ENDPOINT_ENV: &str = "MMDS_BACKEND_ENDPOINT";
/// Bearer token sent to http backends.
pub const TOKEN_ENV: &str = "MMDS_BACKEND_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Script file for the mock backend; without one the mock answers "OK".
    pub script: Option<PathBuf>,
    pub token: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model_name: "mock".into(),
            timeout_s: 30.0,
            max_retries: 2,
            max_in_flight: 4,
            script: None,
            token: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if !self.timeout_s.is_finite() || self.timeout_s <= 0.0 {
            return Err(AdapterError::InvalidConfig("timeout must be positive".into()));
        }
        if self.kind == BackendKind::Http && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return Err(AdapterError::InvalidConfig("http backend requires an endpoint".into()));
        }
        Ok(())
    }

    /// Applies [`ENDPOINT_ENV`] and [`TOKEN_ENV`] through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if self.kind == BackendKind::Http {
            if let Some(endpoint) = lookup(ENDPOINT_ENV).filter(|v| !v.is_empty()) {
                self.endpoint = Some(endpoint);
            }
        }
        if let Some(token) = lookup(TOKEN_ENV).filter(|v| !v.is_empty()) {
            self.token = Some(token);
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, AdapterError> {
        self.validate()?;
        match self.kind {
            BackendKind::Mock => {
                let script = match &self.script {
                    Some(path) => AdapterScript::from_file(path)?,
                    None => AdapterScript::new("OK"),
                };
                Ok(Arc::new(MockBackend::new(script)))
            }
            BackendKind::Http => Ok(Arc::new(HttpBackend::new(self, Arc::new(UreqTransport), self.token.clone())?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn http_requires_endpoint() {
        let cfg = BackendConfig { kind: BackendKind::Http, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = BackendConfig { endpoint: Some("http://x".into()), ..cfg };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn timeout_must_be_positive() {
        let cfg = BackendConfig { timeout_s: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = BackendConfig { kind: BackendKind::Http, endpoint: Some("http://a".into()), ..Default::default() };
        cfg.apply_env(|k| match k {
            ENDPOINT_ENV => Some("http://b".into()),
            TOKEN_ENV => Some("secret".into()),
            _ => None,
        });
        assert_eq!(cfg.endpoint.as_deref(), Some("http://b"));
        assert_eq!(cfg.token.as_deref(), Some("secret"));
    }

    #[test]
    fn parses_from_toml() {
        let cfg: BackendConfig = toml::from_str("kind = \"http\"\nendpoint = \"http://h/v1\"\nmax_retries = 5").unwrap();
        assert_eq!(cfg.kind, BackendKind::Http);
        assert_eq!(cfg.max_retries, 5);
        assert_eq!(cfg.timeout_s, 30.0);
    }
}
