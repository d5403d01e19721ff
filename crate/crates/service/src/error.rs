use std::fmt;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use mmds_core::adapters::AdapterError;
use mmds_core::agent::AgentError;
use mmds_core::evalharness::EvalError;
use mmds_core::ingest::IngestError;
use mmds_core::retrieval::RetrievalError;
use mmds_core::videoparse::VideoError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    BackendUnavailable,
    Conflict,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 5] =
        [ErrorCode::BadRequest, ErrorCode::NotFound, ErrorCode::BackendUnavailable, ErrorCode::Conflict, ErrorCode::Internal];

    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BackendUnavailable => StatusCode::BAD_GATEWAY,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Error body of every failed request: `{"code": ..., "message": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        let message = message.into();
        let message = if message.trim().is_empty() { format!("{code:?}") } else { message };
        Self { code, message }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Conflict, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), axum::Json(self)).into_response()
    }
}

fn io_code(e: &std::io::Error) -> ErrorCode {
    if e.kind() == std::io::ErrorKind::NotFound {
        ErrorCode::NotFound
    } else {
        ErrorCode::Internal
    }
}

fn adapter_code(e: &AdapterError) -> ErrorCode {
    match e {
        AdapterError::BackendUnavailable { .. } | AdapterError::EmptyReply | AdapterError::MalformedResponse(_) => {
            ErrorCode::BackendUnavailable
        }
        AdapterError::InvalidLabels(_) | AdapterError::EmptyPrompt | AdapterError::InvalidConversation(_) => ErrorCode::BadRequest,
        _ => ErrorCode::Internal,
    }
}

fn retrieval_code(e: &RetrievalError) -> ErrorCode {
    match e {
        RetrievalError::Backend(b) => adapter_code(b),
        RetrievalError::DimensionMismatch { .. } => ErrorCode::Internal,
        _ => ErrorCode::BadRequest,
    }
}

fn code_of(e: &mmds_core::Error) -> ErrorCode {
    use mmds_core::Error as E;
    match e {
        E::Adapter(a) => adapter_code(a),
        E::Retrieval(r) => retrieval_code(r),
        E::Ingest(i) => match i {
            IngestError::Backend(a) => adapter_code(a),
            IngestError::Retrieval(r) => retrieval_code(r),
            IngestError::Io(io) => io_code(io),
            IngestError::Corrupt(_) => ErrorCode::Internal,
            _ => ErrorCode::BadRequest,
        },
        E::Agent(a) => match a {
            AgentError::SessionClosed | AgentError::InvalidState { .. } => ErrorCode::Conflict,
            AgentError::EmptyMessage => ErrorCode::BadRequest,
            AgentError::Backend(b) => adapter_code(b),
            AgentError::Retrieval(r) => retrieval_code(r),
            AgentError::Ledger(_) => ErrorCode::Internal,
        },
        E::Video(v) => match v {
            VideoError::Backend(b) => adapter_code(b),
            VideoError::UnparseableReply(_) => ErrorCode::BackendUnavailable,
            VideoError::Io(io) => io_code(io),
            _ => ErrorCode::BadRequest,
        },
        E::Ledger(_) => ErrorCode::Internal,
        E::Eval(v) => match v {
            EvalError::Io(io) => io_code(io),
            EvalError::Csv(_) => ErrorCode::Internal,
            _ => ErrorCode::BadRequest,
        },
    }
}

impl From<mmds_core::Error> for ApiError {
    fn from(e: mmds_core::Error) -> Self {
        ApiError::new(code_of(&e), e.to_string())
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for ApiError {
            fn from(e: $t) -> Self {
                mmds_core::Error::from(e).into()
            }
        }
    )*};
}

via_core!(AdapterError, RetrievalError, IngestError, AgentError, VideoError, EvalError, mmds_core::ledger::LedgerError);
