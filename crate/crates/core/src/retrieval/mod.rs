//! Two-stage retrieval with department routing.
//!
//! Recall scans a flat index by cosine; rank rescored the recalled set and
//! keeps the best `m_final`. In routed mode recall is confined to the
//! department picked by the router; pooled mode recalls over every document.

pub mod embed;
pub mod index;
pub mod rerank;
pub mod route;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AdapterError;
use crate::ingest::{DepartmentKB, KnowledgeBases};
use crate::scalar::Scalar;
use embed::EmbeddingVector;
use index::{by_score_then_id, VectorIndex};
pub use rerank::{RerankTarget, Scorer};
pub use route::Router;

/// Reply used whenever no stored case is good enough.
pub const FALLBACK_MESSAGE: &str = "Sorry, we could not find a suitable answer. Please provide more details.";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("text produced a zero embedding")]
    DegenerateText,
    #[error("no non-empty knowledge base available")]
    NoKnowledgeBases,
    #[error("unknown department `{0}`")]
    UnknownDepartment(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] AdapterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<T> {
    pub pair_id: String,
    pub department: String,
    pub question: String,
    pub answer: String,
    pub recall_score: T,
    pub rank_score: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    #[default]
    Routed,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k_recall: usize,
    pub m_final: usize,
    pub tau: f64,
    pub mode: RetrievalMode,
    pub rerank_target: RerankTarget,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k_recall: 20, m_final: 5, tau: 0.2, mode: RetrievalMode::Routed, rerank_target: RerankTarget::Question }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k_recall == 0 || self.m_final == 0 {
            return Err(RetrievalError::InvalidConfig("k_recall and m_final must be positive".into()));
        }
        if self.m_final > self.k_recall {
            return Err(RetrievalError::InvalidConfig("m_final must not exceed k_recall".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(RetrievalError::InvalidConfig("tau must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: RetrievalMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Retrieval result. `fallback` marks the no-answer branch, which carries
/// [`FALLBACK_MESSAGE`] and no cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome<T> {
    pub department: Option<String>,
    pub cases: Vec<Candidate<T>>,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl<T: Scalar> RetrievalOutcome<T> {
    fn no_answer(department: Option<String>) -> Self {
        Self { department, cases: Vec::new(), fallback: true, message: Some(FALLBACK_MESSAGE.to_owned()) }
    }

    pub fn is_no_answer(&self) -> bool {
        self.fallback
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.pair_id.clone()).collect()
    }
}

fn sort_and_truncate<T: Scalar>(mut candidates: Vec<Candidate<T>>, k: usize) -> Vec<Candidate<T>> {
    candidates.sort_by(|a, b| by_score_then_id((a.recall_score, &a.pair_id), (b.recall_score, &b.pair_id)));
    candidates.truncate(k);
    candidates
}

fn scan_kb<T: Scalar>(query: &EmbeddingVector<T>, kb: &DepartmentKB<T>) -> Vec<Candidate<T>> {
    kb.index()
        .scan(query)
        .into_iter()
        .map(|(pos, score)| {
            let doc = &kb.documents()[pos];
            Candidate {
                pair_id: doc.id.clone(),
                department: kb.department().to_owned(),
                question: doc.question.clone(),
                answer: doc.answer.clone(),
                recall_score: score,
                rank_score: None,
            }
        })
        .collect()
}

/// Top `k` documents of one knowledge base by exact cosine, ties by
/// ascending pair id.
pub fn recall_topk_vector<T: Scalar>(query: &EmbeddingVector<T>, kb: &DepartmentKB<T>, k: usize) -> Vec<Candidate<T>> {
    sort_and_truncate(scan_kb(query, kb), k)
}

pub fn recall_topk<T: Scalar>(
    query: &str,
    kb: &DepartmentKB<T>,
    k: usize,
    kbs: &KnowledgeBases<T>,
) -> Result<Vec<Candidate<T>>, RetrievalError> {
    if kb.is_empty() {
        return Ok(Vec::new());
    }
    Ok(recall_topk_vector(&kbs.embed(query)?, kb, k))
}

/// Top `k` over the union of every knowledge base.
pub fn recall_pooled<T: Scalar>(query: &EmbeddingVector<T>, kbs: &KnowledgeBases<T>, k: usize) -> Vec<Candidate<T>> {
    let all = kbs.iter().flat_map(|(_, kb)| scan_kb(query, kb)).collect();
    sort_and_truncate(all, k)
}

fn finish<T: Scalar>(
    query: &str,
    department: Option<String>,
    recalled: Vec<Candidate<T>>,
    config: &RetrievalConfig,
    scorer: Scorer<'_>,
) -> Result<RetrievalOutcome<T>, RetrievalError> {
    let ranked = rerank::rerank(query, recalled, config.m_final, scorer, config.rerank_target)?;
    let top = ranked.first().and_then(|c| c.rank_score).map(Scalar::to_f64_lossy);
    match top {
        Some(score) if score >= config.tau => Ok(RetrievalOutcome { department, cases: ranked, fallback: false, message: None }),
        _ => Ok(RetrievalOutcome::no_answer(department)),
    }
}

/// Recall and rank inside one already chosen department.
pub fn retrieve_in_department<T: Scalar>(
    query: &str,
    department: &str,
    kbs: &KnowledgeBases<T>,
    config: &RetrievalConfig,
    scorer: Scorer<'_>,
) -> Result<RetrievalOutcome<T>, RetrievalError> {
    config.validate()?;
    let kb = kbs.get(department).ok_or_else(|| RetrievalError::UnknownDepartment(department.to_owned()))?;
    let recalled = recall_topk(query, kb, config.k_recall, kbs)?;
    finish(query, Some(department.to_owned()), recalled, config, scorer)
}

/// Recall and rank across all departments with no routing.
pub fn retrieve_pooled<T: Scalar>(
    query: &str,
    kbs: &KnowledgeBases<T>,
    config: &RetrievalConfig,
    scorer: Scorer<'_>,
) -> Result<RetrievalOutcome<T>, RetrievalError> {
    config.validate()?;
    if kbs.iter().all(|(_, kb)| kb.is_empty()) {
        return Err(RetrievalError::NoKnowledgeBases);
    }
    let q = kbs.embed(query)?;
    let recalled = recall_pooled(&q, kbs, config.k_recall);
    finish(query, None, recalled, config, scorer)
}

/// Full retrieval in the configured mode.
pub fn retrieve<T: Scalar>(
    query: &str,
    kbs: &KnowledgeBases<T>,
    config: &RetrievalConfig,
    router: Router<'_>,
    scorer: Scorer<'_>,
) -> Result<RetrievalOutcome<T>, RetrievalError> {
    config.validate()?;
    match config.mode {
        RetrievalMode::Routed => {
            let department = route::route(query, kbs, router)?;
            retrieve_in_department(query, &department, kbs, config, scorer)
        }
        RetrievalMode::Pooled => retrieve_pooled(query, kbs, config, scorer),
    }
}

/// Share of the first `k` cases that belong to `department`; missing slots
/// count as misses.
pub fn precision_at_k<T>(cases: &[Candidate<T>], department: &str, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = cases.iter().take(k).filter(|c| c.department == department).count();
    hits as f64 / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let bad = RetrievalConfig { m_final: 30, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig { tau: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig { k_recall: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn precision_counts_missing_slots() {
        let c = Candidate {
            pair_id: "1".into(),
            department: "a".into(),
            question: "q".into(),
            answer: "a".into(),
            recall_score: 1.0,
            rank_score: Some(1.0),
        };
        assert_eq!(precision_at_k(&[c.clone(), c], "a", 5), 0.4);
    }
}
