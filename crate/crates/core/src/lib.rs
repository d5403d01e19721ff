//! Department-routed retrieval-augmented consultation engine.
//!
//! The numeric core (embeddings, indexes, routing, projection) is generic
//! over [`Scalar`]; the aliases below pin it to `f64`, which is what the
//! service and CLI use.

pub mod adapters;
pub mod agent;
pub mod clock;
pub mod evalharness;
pub mod ingest;
pub mod ledger;
mod par;
pub mod retrieval;
pub mod scalar;
pub mod templates;
pub mod text;
pub mod videoparse;

pub use scalar::Scalar;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 1024;

pub type Embedding = retrieval::embed::EmbeddingVector<f64>;
pub type Embedding32 = retrieval::embed::EmbeddingVector<f32>;
pub type KnowledgeBase = ingest::DepartmentKB<f64>;
pub type KnowledgeBaseSet = ingest::KnowledgeBases<f64>;
pub type KnowledgeBaseSet32 = ingest::KnowledgeBases<f32>;
pub type Case = retrieval::Candidate<f64>;
pub type Retrieval = retrieval::RetrievalOutcome<f64>;
pub type Report = agent::MedicalReport;

/// Any failure the engine can surface, for callers that cross module
/// boundaries.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Adapter(#[from] adapters::AdapterError),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Retrieval(#[from] retrieval::RetrievalError),
    #[error(transparent)]
    Agent(#[from] agent::AgentError),
    #[error(transparent)]
    Video(#[from] videoparse::VideoError),
    #[error(transparent)]
    Ledger(#[from] ledger::LedgerError),
    #[error(transparent)]
    Eval(#[from] evalharness::EvalError),
}

impl Error {
    /// The upstream model failure underneath this error, if there is one.
    pub fn backend_cause(&self) -> Option<&adapters::AdapterError> {
        match self {
            Error::Adapter(e)
            | Error::Ingest(ingest::IngestError::Backend(e))
            | Error::Retrieval(retrieval::RetrievalError::Backend(e))
            | Error::Agent(agent::AgentError::Backend(e))
            | Error::Agent(agent::AgentError::Retrieval(retrieval::RetrievalError::Backend(e)))
            | Error::Ingest(ingest::IngestError::Retrieval(retrieval::RetrievalError::Backend(e)))
            | Error::Video(videoparse::VideoError::Backend(e)) => Some(e),
            _ => None,
        }
    }
}
