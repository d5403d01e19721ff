
use super::embed::{cosine, EmbeddingVector};
use super::RetrievalError;
use crate::adapters::{classify_label_with_references, Backend};
use crate::ingest::KnowledgeBases;
use crate::scalar::Scalar;
use crate::templates::PromptTemplates;

#[derive(Clone, Copy)]
pub enum Router<'a> {
    /// Highest cosine between the query and each department centroid.
    Centroid,
    /// Asks the backend to name a department among the non-empty ones.
    Adapter { backend: &'a dyn Backend, templates: &'a PromptTemplates },
}

impl std::fmt::Debug for Router<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Router::Centroid => f.write_str("Centroid"),
            Router::Adapter { backend, .. } => write!(f, "Adapter({})", backend.name()),
        }
    }
}

/// Argmax of `scores`, ties broken by the lexicographically smaller id.
pub fn argmax_department<T: Scalar>(scores: &[(String, T)]) -> Option<&str> {
    scores
        .iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .map(|(id, _)| id.as_str())
}

/// Cosine of the query against every non-empty department centroid,
/// ordered by department id.
pub fn centroid_scores<T: Scalar>(query: &EmbeddingVector<T>, kbs: &KnowledgeBases<T>) -> Vec<(String, T)> {
    kbs.iter()
        .filter(|(_, kb)| !kb.is_empty())
        .map(|(id, kb)| (id.to_owned(), cosine(query, kb.centroid())))
        .collect()
}

/// Picks the department whose knowledge base should answer `query`.
/// Empty knowledge bases never win.
pub fn route<T: Scalar>(query: &str, kbs: &KnowledgeBases<T>, router: Router<'_>) -> Result<String, RetrievalError> {
    let candidates: Vec<_> = kbs.iter().filter(|(_, kb)| !kb.is_empty()).collect();
    if candidates.is_empty() {
        return Err(RetrievalError::NoKnowledgeBases);
    }
    if candidates.len() == 1 {
        return Ok(candidates[0].0.to_owned());
    }
    match router {
        Router::Centroid => {
            let q = kbs.embed(query)?;
            let scores = centroid_scores(&q, kbs);
            Ok(argmax_department(&scores).expect("non-empty").to_owned())
        }
        Router::Adapter { backend, templates } => {
            let ids: Vec<String> = candidates.iter().map(|(id, _)| id.to_string()).collect();
            let names: Vec<String> = ids
                .iter()
                .map(|id| kbs.taxonomy().get(id).map(|d| d.display_name.clone()).unwrap_or_else(|| id.clone()))
                .collect();
            let chosen = classify_label_with_references(query, &names, &names, backend, templates)?;
            let idx = names.iter().position(|n| *n == chosen).expect("closure of classify_label");
            Ok(ids[idx].clone())
        }
    }
}
