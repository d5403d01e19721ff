use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::Serialize;

use super::{Accuracy, EvalError};
use crate::videoparse::Grade;

/// `counts[i][j]` = items with gold `labels[i]` predicted as `labels[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix<L> {
    pub labels: Vec<L>,
    pub counts: Vec<Vec<u64>>,
}

impl<L> ConfusionMatrix<L> {
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }

    pub fn diagonal(&self) -> Vec<u64> {
        (0..self.labels.len()).map(|i| self.counts[i][i]).collect()
    }
}

pub fn confusion_matrix<L: PartialEq + Clone + Debug>(
    predicted: &[L],
    gold: &[L],
    labels: &[L],
) -> Result<ConfusionMatrix<L>, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch { predicted: predicted.len(), gold: gold.len() });
    }
    let index = |l: &L| labels.iter().position(|x| x == l).ok_or_else(|| EvalError::UnknownLabel(format!("{l:?}")));
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (p, g) in predicted.iter().zip(gold) {
        counts[index(g)?][index(p)?] += 1;
    }
    Ok(ConfusionMatrix { labels: labels.to_vec(), counts })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GradeAccuracy {
    pub overall: Accuracy,
    /// `None` for grades that never occur in the gold labels.
    pub per_grade: BTreeMap<Grade, Option<Accuracy>>,
}

pub fn per_grade_accuracy(predicted: &[Grade], gold: &[Grade]) -> Result<GradeAccuracy, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch { predicted: predicted.len(), gold: gold.len() });
    }
    let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as u64;
    let per_grade = Grade::ALL
        .into_iter()
        .map(|grade| {
            let of_grade: Vec<_> = predicted.iter().zip(gold).filter(|(_, g)| **g == grade).collect();
            let acc = (!of_grade.is_empty()).then(|| {
                Accuracy::new(of_grade.iter().filter(|(p, g)| p == g).count() as u64, of_grade.len() as u64)
            });
            (grade, acc)
        })
        .collect();
    Ok(GradeAccuracy { overall: Accuracy::new(correct, gold.len() as u64), per_grade })
}
