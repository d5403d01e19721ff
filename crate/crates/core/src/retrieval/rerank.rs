//! Second-stage scoring of recalled candidates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Candidate, RetrievalError};
use crate::adapters::Backend;
use crate::scalar::Scalar;
use crate::text;

/// Which document text the rank stage reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankTarget {
    #[default]
    Question,
    QuestionAndAnswer,
}

#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    /// Token-overlap F1.
    Reference,
    /// Delegates to the backend's pairwise scorer.
    Adapter(&'a dyn Backend),
}

impl std::fmt::Debug for Scorer<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scorer::Reference => f.write_str("Reference"),
            Scorer::Adapter(b) => write!(f, "Adapter({})", b.name()),
        }
    }
}

/// F1 of the token multisets of `query` and `document`; 0 when they share
/// nothing or either side has no tokens.
pub fn token_f1<T: Scalar>(query: &str, document: &str) -> T {
    let q = text::tokens(query);
    let d = text::tokens(document);
    if q.is_empty() || d.is_empty() {
        return T::zero();
    }
    let mut doc_counts: HashMap<&str, usize> = HashMap::new();
    for t in &d {
        *doc_counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &q {
        if let Some(c) = doc_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return T::zero();
    }
    // 2PR/(P+R) reduces to 2c/(|q|+|d|): one rounding instead of several.
    T::lit(2.0 * common as f64) / T::lit((q.len() + d.len()) as f64)
}

fn document_text<T>(candidate: &Candidate<T>, target: RerankTarget) -> String {
    match target {
        RerankTarget::Question => candidate.question.clone(),
        RerankTarget::QuestionAndAnswer => format!("{} {}", candidate.question, candidate.answer),
    }
}

/// Scores every candidate, then keeps the top `m` by rank score, breaking
/// ties by recall score and then ascending pair id.
pub fn rerank<T: Scalar>(
    query: &str,
    mut candidates: Vec<Candidate<T>>,
    m: usize,
    scorer: Scorer<'_>,
    target: RerankTarget,
) -> Result<Vec<Candidate<T>>, RetrievalError> {
    for candidate in &mut candidates {
        let doc = document_text(candidate, target);
        let score = match scorer {
            Scorer::Reference => token_f1::<T>(query, &doc),
            Scorer::Adapter(backend) => {
                let raw = backend.score_pair(query, &doc)?;
                let raw = if raw.is_nan() { 0.0 } else { raw.clamp(0.0, 1.0) };
                T::lit(raw)
            }
        };
        candidate.rank_score = Some(score);
    }
    candidates.sort_by(|a, b| {
        let ra = a.rank_score.unwrap_or_else(T::zero);
        let rb = b.rank_score.unwrap_or_else(T::zero);
        rb.total_cmp(&ra)
            .then_with(|| b.recall_score.total_cmp(&a.recall_score))
            .then_with(|| a.pair_id.cmp(&b.pair_id))
    });
    candidates.truncate(m);
    Ok(candidates)
}
