use std::io::Write;

use serde::Serialize;

use super::{pca, EvalError};
use crate::ingest::KnowledgeBases;
use crate::retrieval::embed::cosine;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedDoc {
    pub doc_id: String,
    pub department: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub departments: Vec<String>,
    pub centroid_cosine: Vec<Vec<f64>>,
    pub projection_2d: Vec<ProjectedDoc>,
    pub cross_department_confusion: f64,
}

impl OverlapReport {
    /// CSV with header `doc_id,department,x,y`.
    pub fn write_projection_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut writer = csv::Writer::from_writer(out);
        for doc in &self.projection_2d {
            writer.serialize(doc)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Centroid cosines between non-empty departments, the share of documents
/// whose nearest foreign document beats their nearest same-department
/// neighbour, and a 2D projection of every stored vector.
pub fn overlap_report<T: Scalar>(kbs: &KnowledgeBases<T>) -> Result<OverlapReport, EvalError> {
    let kbs_used: Vec<_> = kbs.iter().filter(|(_, kb)| !kb.is_empty()).collect();
    if kbs_used.len() < 2 {
        return Err(EvalError::NoKnowledgeBases);
    }
    let departments: Vec<String> = kbs_used.iter().map(|(id, _)| id.to_string()).collect();
    let k = kbs_used.len();
    let mut centroid_cosine = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let c = cosine(kbs_used[i].1.centroid(), kbs_used[j].1.centroid()).to_f64_lossy();
            centroid_cosine[i][j] = c;
            centroid_cosine[j][i] = c;
        }
    }

    let mut docs = Vec::new();
    for (dept_idx, (id, kb)) in kbs_used.iter().enumerate() {
        for (pair, vector) in kb.documents().iter().zip(kb.index().vectors()) {
            docs.push((dept_idx, *id, pair.id.as_str(), vector));
        }
    }
    let mut confused = 0usize;
    for (a, (dept_a, _, _, va)) in docs.iter().enumerate() {
        let mut own = f64::NEG_INFINITY;
        let mut foreign = f64::NEG_INFINITY;
        for (b, (dept_b, _, _, vb)) in docs.iter().enumerate() {
            if a == b {
                continue;
            }
            let s = cosine(va, vb).to_f64_lossy();
            if dept_a == dept_b {
                own = own.max(s);
            } else {
                foreign = foreign.max(s);
            }
        }
        if foreign > own {
            confused += 1;
        }
    }
    let cross_department_confusion = confused as f64 / docs.len() as f64;

    let vectors: Vec<Vec<T>> = docs.iter().map(|(_, _, _, v)| v.values().to_vec()).collect();
    let projection = pca::pca_project(&vectors, 2)?;
    let projection_2d = docs
        .iter()
        .zip(&projection.coords)
        .map(|((_, dept, id, _), c)| ProjectedDoc {
            doc_id: id.to_string(),
            department: dept.to_string(),
            x: c[0].to_f64_lossy(),
            y: c[1].to_f64_lossy(),
        })
        .collect();
    Ok(OverlapReport { departments, centroid_cosine, projection_2d, cross_department_confusion })
}
