//! Question-answer generation, department classification and per-department
//! knowledge bases.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{chat_complete, classify_label_with_references, templated_prompt, AdapterError, Backend};
use crate::retrieval::embed::{Embedder, EmbeddingVector};
use crate::retrieval::index::{FlatIndex, VectorIndex};
use crate::retrieval::RetrievalError;
use crate::scalar::Scalar;
use crate::templates::{CallSite, PromptTemplates};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("document is empty")]
    EmptyDocument,
    #[error("no parseable `Q: ... A: ...` block in generation for `{0}`")]
    MalformedGeneration(String),
    #[error("unknown department `{0}`")]
    UnknownDepartment(String),
    #[error("pair `{0}` has no department")]
    Unassigned(String),
    #[error("invalid pair `{0}`: question and answer must be non-empty")]
    InvalidPair(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("corrupt knowledge base: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Backend(#[from] AdapterError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Department {
    pub id: String,
    pub display_name: String,
}

impl Department {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>) -> Self {
        Self { id: id.into(), display_name: display_name.into() }
    }
}

/// Non-empty list of departments with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct Taxonomy {
    departments: Vec<Department>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    departments: Vec<Department>,
}

impl TryFrom<TaxonomyFile> for Taxonomy {
    type Error = IngestError;
    fn try_from(file: TaxonomyFile) -> Result<Self, Self::Error> {
        Taxonomy::new(file.departments)
    }
}

impl From<Taxonomy> for TaxonomyFile {
    fn from(t: Taxonomy) -> Self {
        TaxonomyFile { departments: t.departments }
    }
}

impl Default for Taxonomy {
    fn default() -> Self {
        let departments = [
            ("internal", "Internal Medicine"),
            ("surgery", "Surgery"),
            ("neuro", "Neurology"),
            ("derm", "Dermatology"),
            ("ophth", "Ophthalmology"),
            ("ent", "Otolaryngology"),
            ("cardio", "Cardiology"),
            ("resp", "Respiratory Medicine"),
            ("gastro", "Gastroenterology"),
            ("ortho", "Orthopedics"),
            ("peds", "Pediatrics"),
            ("psych", "Psychiatry"),
        ]
        .into_iter()
        .map(|(id, name)| Department::new(id, name))
        .collect();
        Self { departments }
    }
}

impl Taxonomy {
    pub fn new(departments: Vec<Department>) -> Result<Self, IngestError> {
        if departments.is_empty() {
            return Err(IngestError::InvalidTaxonomy("no departments".into()));
        }
        for (i, d) in departments.iter().enumerate() {
            if d.id.trim().is_empty() {
                return Err(IngestError::InvalidTaxonomy("empty department id".into()));
            }
            if departments[..i].iter().any(|o| o.id == d.id) {
                return Err(IngestError::InvalidTaxonomy(format!("duplicate id `{}`", d.id)));
            }
        }
        Ok(Self { departments })
    }

    /// Reads a TOML file of `[[departments]]` tables.
    pub fn from_toml_file(path: &Path) -> Result<Self, IngestError> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn departments(&self) -> &[Department] {
        &self.departments
    }

    pub fn ids(&self) -> Vec<String> {
        self.departments.iter().map(|d| d.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Department> {
        self.departments.iter().find(|d| d.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub department: Option<String>,
    #[serde(default)]
    pub source_doc: String,
}

impl QAPair {
    pub fn new(id: impl Into<String>, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            department: None,
            source_doc: String::new(),
        }
    }

    pub fn in_department(mut self, department: impl Into<String>) -> Self {
        self.department = Some(department.into());
        self
    }

    /// Text that gets embedded: question, a space, answer.
    pub fn index_text(&self) -> String {
        format!("{} {}", self.question, self.answer)
    }

    fn validate(&self) -> Result<(), IngestError> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(IngestError::InvalidPair(self.id.clone()));
        }
        Ok(())
    }
}

/// Raw input document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    pub text: String,
}

/// Extracts `(question, answer)` blocks. A block is either one line
/// `Q: ... A: ...` or a `Q:` line followed later by an `A:` line; any other
/// line is ignored.
pub fn parse_qa_blocks(reply: &str) -> Vec<(String, String)> {
    fn strip_tag(line: &str, tag: char) -> Option<&str> {
        let mut chars = line.chars();
        let first = chars.next()?;
        if first.eq_ignore_ascii_case(&tag) && chars.next() == Some(':') {
            Some(line[2..].trim())
        } else {
            None
        }
    }

    let mut pairs = Vec::new();
    let mut pending: Option<String> = None;
    for line in reply.lines().map(str::trim) {
        if let Some(rest) = strip_tag(line, 'q') {
            pending = None;
            match rest.find(" A:").or_else(|| rest.find(" a:")) {
                Some(split) => {
                    let q = rest[..split].trim();
                    let a = rest[split + 3..].trim();
                    if !q.is_empty() && !a.is_empty() {
                        pairs.push((q.to_owned(), a.to_owned()));
                    }
                }
                None if !rest.is_empty() => pending = Some(rest.to_owned()),
                None => {}
            }
        } else if let Some(answer) = strip_tag(line, 'a') {
            if let Some(q) = pending.take() {
                if !answer.is_empty() {
                    pairs.push((q, answer.to_owned()));
                }
            }
        }
    }
    pairs
}

/// Asks the generation backend for QA pairs about `document`.
pub fn generate_qa(
    document: &SourceDocument,
    backend: &dyn Backend,
    templates: &PromptTemplates,
) -> Result<Vec<QAPair>, IngestError> {
    if document.text.trim().is_empty() {
        return Err(IngestError::EmptyDocument);
    }
    let prompt = templated_prompt(templates, CallSite::GenerateQa, &[("document", &document.text)]);
    let reply = chat_complete(&prompt, backend)?;
    let blocks = parse_qa_blocks(&reply);
    if blocks.is_empty() {
        return Err(IngestError::MalformedGeneration(document.id.clone()));
    }
    Ok(blocks
        .into_iter()
        .enumerate()
        .map(|(i, (question, answer))| QAPair {
            id: format!("{}#q{}", document.id, i + 1),
            question,
            answer,
            department: None,
            source_doc: document.id.clone(),
        })
        .collect())
}

/// Department id for `pair`; always a member of `taxonomy`.
pub fn classify_department(
    pair: &QAPair,
    taxonomy: &Taxonomy,
    backend: &dyn Backend,
    templates: &PromptTemplates,
) -> Result<String, IngestError> {
    pair.validate()?;
    let ids = taxonomy.ids();
    let names: Vec<String> = taxonomy.departments().iter().map(|d| d.display_name.clone()).collect();
    Ok(classify_label_with_references(&pair.index_text(), &ids, &names, backend, templates)?)
}

/// One department's documents, their vectors and the normalized mean vector.
#[derive(Debug, Clone)]
pub struct DepartmentKB<T: Scalar> {
    department: String,
    documents: Vec<QAPair>,
    index: FlatIndex<T>,
    positions: HashMap<String, usize>,
    centroid: EmbeddingVector<T>,
}

impl<T: Scalar> DepartmentKB<T> {
    pub fn new(department: impl Into<String>, dim: usize) -> Self {
        Self {
            department: department.into(),
            documents: Vec::new(),
            index: FlatIndex::default(),
            positions: HashMap::new(),
            centroid: EmbeddingVector::zero(dim),
        }
    }

    pub fn department(&self) -> &str {
        &self.department
    }

    pub fn documents(&self) -> &[QAPair] {
        &self.documents
    }

    pub fn index(&self) -> &FlatIndex<T> {
        &self.index
    }

    pub fn centroid(&self) -> &EmbeddingVector<T> {
        &self.centroid
    }

    /// True for the zero-flagged centroid of an empty knowledge base.
    pub fn centroid_is_zero(&self) -> bool {
        self.centroid.is_zero()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn contains(&self, pair_id: &str) -> bool {
        self.positions.contains_key(pair_id)
    }

    fn upsert(&mut self, pair: QAPair, vector: EmbeddingVector<T>) {
        match self.positions.get(&pair.id) {
            Some(&pos) => {
                self.documents[pos] = pair;
                self.index.replace(pos, vector);
            }
            None => {
                self.positions.insert(pair.id.clone(), self.documents.len());
                self.documents.push(pair);
                self.index.push(vector);
            }
        }
    }

    fn remove(&mut self, pair_id: &str) {
        if let Some(pos) = self.positions.remove(pair_id) {
            self.documents.remove(pos);
            let mut vectors = self.index.vectors().to_vec();
            vectors.remove(pos);
            self.index = FlatIndex::new(vectors);
            self.positions = self.documents.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
        }
    }

    fn recompute_centroid(&mut self) {
        let dim = self.centroid.dim();
        let mut sum = vec![T::zero(); dim];
        for v in self.index.vectors() {
            for (s, x) in sum.iter_mut().zip(v.values()) {
                *s += *x;
            }
        }
        let n = T::lit(self.index.len().max(1) as f64);
        let mean = sum.into_iter().map(|s| s / n).collect();
        self.centroid = EmbeddingVector::normalized(mean).unwrap_or_else(|| EmbeddingVector::zero(dim));
    }

    /// Checks the structural invariants (index/document alignment, department
    /// membership, centroid norm).
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.index.len() != self.documents.len() {
            return Err(format!("{}: index size {} != documents {}", self.department, self.index.len(), self.documents.len()));
        }
        if let Some(d) = self.documents.iter().find(|d| d.department.as_deref() != Some(self.department.as_str())) {
            return Err(format!("{}: member `{}` belongs to {:?}", self.department, d.id, d.department));
        }
        if !self.is_empty() && (self.centroid.norm() - T::one()).abs() > T::unit_tolerance() {
            return Err(format!("{}: centroid not unit norm", self.department));
        }
        Ok(())
    }
}

/// Every department's knowledge base plus the embedder that built them.
#[derive(Clone)]
pub struct KnowledgeBases<T: Scalar> {
    taxonomy: Taxonomy,
    embedder: Arc<dyn Embedder<T>>,
    kbs: BTreeMap<String, DepartmentKB<T>>,
    owner: HashMap<String, String>,
}

impl<T: Scalar> std::fmt::Debug for KnowledgeBases<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeBases")
            .field("embedder", &self.embedder.describe())
            .field("sizes", &self.sizes())
            .finish()
    }
}

impl<T: Scalar> KnowledgeBases<T> {
    /// Empty knowledge base for every department in `taxonomy`.
    pub fn new(taxonomy: Taxonomy, embedder: Arc<dyn Embedder<T>>) -> Self {
        let dim = embedder.dim();
        let kbs = taxonomy.ids().into_iter().map(|id| (id.clone(), DepartmentKB::new(id, dim))).collect();
        Self { taxonomy, embedder, kbs, owner: HashMap::new() }
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn embedder(&self) -> &dyn Embedder<T> {
        self.embedder.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector<T>, RetrievalError> {
        self.embedder.embed(text)
    }

    pub fn get(&self, department: &str) -> Option<&DepartmentKB<T>> {
        self.kbs.get(department)
    }

    /// Knowledge bases in department-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &DepartmentKB<T>)> {
        self.kbs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn sizes(&self) -> BTreeMap<String, usize> {
        self.kbs.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    pub fn total_documents(&self) -> usize {
        self.kbs.values().map(DepartmentKB::len).sum()
    }

    pub fn department_of(&self, pair_id: &str) -> Option<&str> {
        self.owner.get(pair_id).map(String::as_str)
    }

    pub fn find_pair(&self, pair_id: &str) -> Option<&QAPair> {
        let kb = self.kbs.get(self.owner.get(pair_id)?)?;
        kb.documents().iter().find(|d| d.id == pair_id)
    }

    /// Inserts classified pairs, replacing any pair with the same id (also
    /// across departments), then refreshes the affected centroids.
    pub fn upsert_all(&mut self, pairs: impl IntoIterator<Item = QAPair>) -> Result<usize, IngestError> {
        let mut staged = Vec::new();
        for pair in pairs {
            pair.validate()?;
            let dept = pair.department.clone().ok_or_else(|| IngestError::Unassigned(pair.id.clone()))?;
            if !self.kbs.contains_key(&dept) {
                return Err(IngestError::UnknownDepartment(dept));
            }
            let vector = self.embedder.embed(&pair.index_text())?;
            staged.push((dept, pair, vector));
        }
        let mut touched = std::collections::BTreeSet::new();
        let count = staged.len();
        for (dept, pair, vector) in staged {
            if let Some(previous) = self.owner.get(&pair.id).cloned() {
                if previous != dept {
                    self.kbs.get_mut(&previous).expect("owner consistent").remove(&pair.id);
                    touched.insert(previous);
                }
            }
            self.owner.insert(pair.id.clone(), dept.clone());
            self.kbs.get_mut(&dept).expect("checked").upsert(pair, vector);
            touched.insert(dept);
        }
        for dept in touched {
            self.kbs.get_mut(&dept).expect("exists").recompute_centroid();
        }
        Ok(count)
    }

    pub fn upsert(&mut self, pair: QAPair) -> Result<(), IngestError> {
        self.upsert_all([pair]).map(|_| ())
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for kb in self.kbs.values() {
            kb.check_invariants()?;
        }
        let total: usize = self.kbs.values().map(DepartmentKB::len).sum();
        if total != self.owner.len() {
            return Err("a pair id is stored in more than one knowledge base".into());
        }
        Ok(())
    }
}

/// Partitions classified pairs into one knowledge base per department.
pub fn build_kbs<T: Scalar>(
    pairs: impl IntoIterator<Item = QAPair>,
    taxonomy: &Taxonomy,
    embedder: Arc<dyn Embedder<T>>,
) -> Result<KnowledgeBases<T>, IngestError> {
    let mut kbs = KnowledgeBases::new(taxonomy.clone(), embedder);
    kbs.upsert_all(pairs)?;
    Ok(kbs)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub documents: usize,
    pub pairs: usize,
    pub departments: BTreeMap<String, usize>,
    pub skipped: Vec<SkippedDocument>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedDocument {
    pub id: String,
    pub reason: String,
}

/// Generates, classifies and stores the pairs of every document. Documents
/// whose generation is empty or unparseable are skipped and reported.
pub fn ingest_documents<T: Scalar>(
    documents: &[SourceDocument],
    kbs: &mut KnowledgeBases<T>,
    generator: &dyn Backend,
    classifier: &dyn Backend,
    templates: &PromptTemplates,
) -> Result<IngestSummary, IngestError> {
    let mut summary = IngestSummary { documents: documents.len(), ..Default::default() };
    let mut classified = Vec::new();
    for doc in documents {
        let pairs = match generate_qa(doc, generator, templates) {
            Ok(pairs) => pairs,
            Err(err @ (IngestError::MalformedGeneration(_) | IngestError::EmptyDocument)) => {
                summary.skipped.push(SkippedDocument { id: doc.id.clone(), reason: err.to_string() });
                continue;
            }
            Err(err) => return Err(err),
        };
        for mut pair in pairs {
            let dept = classify_department(&pair, kbs.taxonomy(), classifier, templates)?;
            pair.department = Some(dept);
            classified.push(pair);
        }
    }
    summary.pairs = kbs.upsert_all(classified)?;
    summary.departments = kbs.sizes();
    Ok(summary)
}

/// Reads a corpus: a directory of `.txt` files (id = file stem), a JSONL
/// file of `{"id", "text"}` records, or a single text file.
pub fn load_corpus(path: &Path) -> Result<Vec<SourceDocument>, IngestError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        return files
            .into_iter()
            .map(|p| {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(SourceDocument { id, text: fs::read_to_string(&p)? })
            })
            .collect();
    }
    if path.extension().is_some_and(|e| e == "jsonl") {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut docs = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                docs.push(serde_json::from_str(&line)?);
            }
        }
        return Ok(docs);
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(vec![SourceDocument { id, text: fs::read_to_string(path)? }])
}

#[derive(Serialize, Deserialize)]
struct IndexManifest<T> {
    embedder: String,
    dim: usize,
    departments: Vec<ManifestDepartment<T>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestDepartment<T> {
    id: String,
    display_name: String,
    documents: usize,
    centroid: Vec<T>,
    centroid_norm: T,
    vectors: Vec<ManifestVector<T>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestVector<T> {
    id: String,
    norm: T,
    values: Vec<T>,
}

pub const INDEX_MANIFEST: &str = "index.json";

impl<T: Scalar> KnowledgeBases<T> {
    /// Writes `<dept>.jsonl` per department and the JSON index manifest.
    pub fn save(&self, dir: &Path) -> Result<(), IngestError> {
        fs::create_dir_all(dir)?;
        let mut departments = Vec::new();
        for dept in self.taxonomy.departments() {
            let kb = &self.kbs[&dept.id];
            let mut file = fs::File::create(dir.join(format!("{}.jsonl", dept.id)))?;
            for pair in kb.documents() {
                writeln!(file, "{}", serde_json::to_string(pair)?)?;
            }
            departments.push(ManifestDepartment {
                id: dept.id.clone(),
                display_name: dept.display_name.clone(),
                documents: kb.len(),
                centroid: kb.centroid().values().to_vec(),
                centroid_norm: kb.centroid().norm(),
                vectors: kb
                    .documents()
                    .iter()
                    .zip(kb.index().vectors())
                    .map(|(d, v)| ManifestVector { id: d.id.clone(), norm: v.norm(), values: v.values().to_vec() })
                    .collect(),
            });
        }
        let manifest = IndexManifest { embedder: self.embedder.describe(), dim: self.dim(), departments };
        fs::write(dir.join(INDEX_MANIFEST), serde_json::to_string(&manifest)?)?;
        Ok(())
    }

    /// Loads what [`KnowledgeBases::save`] wrote. Stored vectors are used
    /// as-is; `embedder` only embeds future queries and must match `dim`.
    pub fn load(dir: &Path, embedder: Arc<dyn Embedder<T>>) -> Result<Self, IngestError> {
        let manifest: IndexManifest<T> = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_MANIFEST))?)?;
        if manifest.dim != embedder.dim() {
            return Err(IngestError::Corrupt(format!("index dim {} but embedder dim {}", manifest.dim, embedder.dim())));
        }
        let taxonomy = Taxonomy::new(
            manifest.departments.iter().map(|d| Department::new(d.id.clone(), d.display_name.clone())).collect(),
        )?;
        let mut kbs = KnowledgeBases::new(taxonomy, embedder);
        for dept in manifest.departments {
            let reader = BufReader::new(fs::File::open(dir.join(format!("{}.jsonl", dept.id)))?);
            let mut pairs = Vec::new();
            for line in reader.lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    pairs.push(serde_json::from_str::<QAPair>(&line)?);
                }
            }
            if pairs.len() != dept.documents || pairs.len() != dept.vectors.len() {
                return Err(IngestError::Corrupt(format!("{}: document count mismatch", dept.id)));
            }
            let kb = kbs.kbs.get_mut(&dept.id).expect("taxonomy from manifest");
            for (pair, vector) in pairs.into_iter().zip(dept.vectors) {
                if pair.id != vector.id || vector.values.len() != manifest.dim {
                    return Err(IngestError::Corrupt(format!("{}: vector for `{}` misaligned", dept.id, pair.id)));
                }
                if pair.department.as_deref() != Some(dept.id.as_str()) {
                    return Err(IngestError::Corrupt(format!("pair `{}` stored under {}", pair.id, dept.id)));
                }
                kbs.owner.insert(pair.id.clone(), dept.id.clone());
                kb.upsert(pair, EmbeddingVector::from_stored(vector.values));
            }
            kb.recompute_centroid();
        }
        Ok(kbs)
    }
}
