//! Unit-norm embedding vectors and the deterministic reference embedder.
//!
//! The reference embedder hashes character 2- and 3-grams of the normalized
//! text into `dim` signed buckets, weights each distinct gram by
//! `1 + ln(count)`, and L2-normalizes the result.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::adapters::Backend;
use crate::scalar::Scalar;
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// All-zero sentinel (empty knowledge bases). Never compared against.
    pub fn zero(dim: usize) -> Self {
        Self { values: vec![T::zero(); dim] }
    }

    /// Normalizes `values`; `None` for a zero or non-finite vector.
    pub fn normalized(values: Vec<T>) -> Option<Self> {
        let norm = l2_norm(&values);
        if norm == T::zero() || !norm.is_finite() {
            return None;
        }
        Some(Self { values: values.into_iter().map(|v| v / norm).collect() })
    }

    /// Wraps values as stored, without renormalizing.
    pub fn from_stored(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.values)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }

    pub fn dot(&self, other: &Self) -> T {
        self.values.iter().zip(&other.values).map(|(a, b)| *a * *b).sum()
    }
}

fn l2_norm<T: Scalar>(values: &[T]) -> T {
    values.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> T {
    let denom = a.norm() * b.norm();
    if denom == T::zero() {
        return T::zero();
    }
    a.dot(b) / denom
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Character n-gram counts (n = 2, 3) of the normalized text. Texts of a
/// single character contribute that character as their only gram.
pub fn char_ngram_counts(normalized: &str) -> BTreeMap<String, u32> {
    let chars: Vec<char> = normalized.chars().collect();
    let mut counts = BTreeMap::new();
    if chars.len() == 1 {
        counts.insert(normalized.to_owned(), 1);
        return counts;
    }
    for n in [2usize, 3] {
        for window in chars.windows(n) {
            *counts.entry(window.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn reference_embed<T: Scalar>(text: &str, dim: usize) -> Result<EmbeddingVector<T>, RetrievalError> {
    if dim == 0 {
        return Err(RetrievalError::InvalidConfig("embedding dimension must be positive".into()));
    }
    let normalized = text::normalize(text);
    if normalized.is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    let mut values = vec![T::zero(); dim];
    for (gram, count) in char_ngram_counts(&normalized) {
        let hash = fnv1a(gram.as_bytes());
        let bucket = (hash % dim as u64) as usize;
        let weight = T::one() + T::lit(f64::from(count)).ln();
        if (hash >> 63) == 0 {
            values[bucket] += weight;
        } else {
            values[bucket] -= weight;
        }
    }
    EmbeddingVector::normalized(values).ok_or(RetrievalError::DegenerateText)
}

/// Text to unit vector.
pub trait Embedder<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>, RetrievalError>;
    /// Short description recorded in persisted indexes.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceEmbedder {
    pub dim: usize,
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self { dim: crate::DEFAULT_DIM }
    }
}

impl<T: Scalar> Embedder<T> for ReferenceEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>, RetrievalError> {
        reference_embed(text, self.dim)
    }

    fn describe(&self) -> String {
        format!("reference-char-ngram-{}", self.dim)
    }
}

/// Embeds through a model backend's `embed` verb.
pub struct BackendEmbedder {
    backend: Arc<dyn Backend>,
    dim: usize,
}

impl BackendEmbedder {
    pub fn new(backend: Arc<dyn Backend>, dim: usize) -> Self {
        Self { backend, dim }
    }
}

impl<T: Scalar> Embedder<T> for BackendEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>, RetrievalError> {
        if text::normalize(text).is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let raw = self.backend.embed(text)?;
        if raw.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, found: raw.len() });
        }
        let values = raw.into_iter().map(T::lit).collect();
        EmbeddingVector::normalized(values).ok_or(RetrievalError::DegenerateText)
    }

    fn describe(&self) -> String {
        format!("backend-{}-{}", self.backend.name(), self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_and_unit() {
        let a = reference_embed::<f64>("Left eye will not close", 256).unwrap();
        let b = reference_embed::<f64>("left  eye will not close ", 256).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(reference_embed::<f64>("   \n", 256), Err(RetrievalError::EmptyText)));
    }

    #[test]
    fn single_character_embeds() {
        let v = reference_embed::<f64>("x", 64).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f32_embedding_is_close_to_f64() {
        let a = reference_embed::<f64>("facial nerve inflammation", 128).unwrap();
        let b = reference_embed::<f32>("facial nerve inflammation", 128).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - f64::from(*y)).abs() < 1e-6);
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn zero_vector_cosine_is_zero() {
        let z = EmbeddingVector::<f64>::zero(8);
        let v = reference_embed::<f64>("abc", 8).unwrap();
        assert_eq!(cosine(&z, &v), 0.0);
        assert!(z.is_zero());
    }

    proptest! {
        #[test]
        fn always_unit_norm(text in "[a-z ]{1,60}") {
            prop_assume!(!text.trim().is_empty());
            match reference_embed::<f64>(&text, 256) {
                Ok(v) => prop_assert!((v.norm() - 1.0).abs() < 1e-9),
                Err(e) => prop_assert!(matches!(e, RetrievalError::DegenerateText)),
            }
        }
    }
}
