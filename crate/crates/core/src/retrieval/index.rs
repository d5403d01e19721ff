
use super::embed::{cosine, EmbeddingVector};
use crate::scalar::Scalar;

/// Similarity search over a fixed set of vectors. `scan` returns every
/// (position, cosine) pair; callers impose ordering and truncation.
pub trait VectorIndex<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn scan(&self, query: &EmbeddingVector<T>) -> Vec<(usize, T)>;
}

/// Exhaustive index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatIndex<T> {
    vectors: Vec<EmbeddingVector<T>>,
}

impl<T: Scalar> FlatIndex<T> {
    pub fn new(vectors: Vec<EmbeddingVector<T>>) -> Self {
        Self { vectors }
    }

    pub fn vectors(&self) -> &[EmbeddingVector<T>] {
        &self.vectors
    }

    pub fn push(&mut self, vector: EmbeddingVector<T>) {
        self.vectors.push(vector);
    }

    pub fn replace(&mut self, position: usize, vector: EmbeddingVector<T>) {
        self.vectors[position] = vector;
    }
}

impl<T: Scalar> VectorIndex<T> for FlatIndex<T> {
    fn len(&self) -> usize {
        self.vectors.len()
    }

    fn scan(&self, query: &EmbeddingVector<T>) -> Vec<(usize, T)> {
        self.vectors.iter().enumerate().map(|(i, v)| (i, cosine(query, v))).collect()
    }
}

/// Descending score, ascending id.
pub(crate) fn by_score_then_id<T: Scalar>(a: (T, &str), b: (T, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}
