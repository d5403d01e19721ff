//! Evaluation harness: multiple-choice accuracy for the base, pooled-RAG
//! and routed-RAG pipelines, confusion matrices, per-grade accuracy,
//! embedding projection and overlap analysis, and synthetic corpora with
//! known ground truth.

pub mod corpus;
pub mod metrics;
pub mod overlap;
pub mod pca;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::adapters::{self, Backend};
use crate::ingest::KnowledgeBases;
use crate::retrieval::{self, route, Candidate, RetrievalConfig, Router, Scorer};
use crate::scalar::Scalar;
use crate::templates::{CallSite, PromptTemplates};

pub use corpus::{make_disjoint_corpus, make_overlap_corpus, RetrievalEchoBackend, SyntheticCorpus, SyntheticQuery};
pub use metrics::{confusion_matrix, per_grade_accuracy, ConfusionMatrix, GradeAccuracy};
pub use overlap::{overlap_report, OverlapReport};
pub use pca::{pca_project, Projection};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid item `{id}`: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("length mismatch: {predicted} predictions for {gold} gold labels")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("label `{0}` is not in the label set")]
    UnknownLabel(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("at least two non-empty knowledge bases are required")]
    NoKnowledgeBases,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("pipeline needs knowledge bases")]
    MissingKnowledgeBases,
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Multiple-choice item with single-letter option keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQItem {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<char, String>,
    pub gold: char,
}

impl MCQItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let invalid = |reason: &str| EvalError::InvalidItem { id: self.id.clone(), reason: reason.into() };
        if self.options.len() < 2 {
            return Err(invalid("fewer than two options"));
        }
        if self.options.keys().any(|k| !('A'..='E').contains(k)) {
            return Err(invalid("option keys must be letters A to E"));
        }
        if !self.options.contains_key(&self.gold) {
            return Err(invalid("gold letter is not an option"));
        }
        Ok(())
    }

    pub fn letters(&self) -> Vec<char> {
        self.options.keys().copied().collect()
    }
}

#[derive(Deserialize)]
struct MedQaLine {
    #[serde(default)]
    id: Option<String>,
    question: String,
    options: BTreeMap<String, String>,
    answer_idx: String,
}

fn single_letter(s: &str) -> Option<char> {
    let mut chars = s.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

/// Parses MedQA-style JSONL: `{"question", "options": {"A": ..}, "answer_idx"}`
/// with an optional `id` (defaults to the 1-based line number).
pub fn parse_medqa(jsonl: &str) -> Result<Vec<MCQItem>, EvalError> {
    let mut items = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: MedQaLine = serde_json::from_str(line).map_err(|source| EvalError::Parse { line: i + 1, source })?;
        let id = raw.id.unwrap_or_else(|| format!("q{}", i + 1));
        let bad = |reason: &str| EvalError::InvalidItem { id: id.clone(), reason: reason.into() };
        let mut options = BTreeMap::new();
        for (k, v) in raw.options {
            options.insert(single_letter(&k).ok_or_else(|| bad("option key is not a single letter"))?, v);
        }
        let gold = single_letter(&raw.answer_idx).ok_or_else(|| bad("answer_idx is not a single letter"))?;
        let item = MCQItem { id: id.clone(), question: raw.question, options, gold };
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

pub fn load_medqa(path: &Path) -> Result<Vec<MCQItem>, EvalError> {
    parse_medqa(&fs::read_to_string(path)?)
}

fn answer_patterns() -> &'static [Regex; 4] {
    static RE: OnceLock<[Regex; 4]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"(?i)\banswer\s+is\s*:?\s*\(?([a-z])\b").expect("static regex"),
            Regex::new(r"(?i)\(([a-z])\)").expect("static regex"),
            Regex::new(r"(?i)(?:^|[^[:alnum:]])([a-z])[.:](?:\s|$)").expect("static regex"),
            Regex::new(r"(?im)^\s*([a-z])\s*$").expect("static regex"),
        ]
    })
}

/// First standalone option letter in `reply`: `answer is X`, `(X)`, `X.` or
/// `X:` followed by whitespace or the end, or a line holding only `X`.
/// `None` means abstain.
pub fn extract_answer(reply: &str, options: &[char]) -> Option<char> {
    let mut best: Option<(usize, char)> = None;
    for re in answer_patterns() {
        for caps in re.captures_iter(reply) {
            let m = caps.get(1).expect("group");
            let letter = m.as_str().chars().next().expect("one char").to_ascii_uppercase();
            if options.contains(&letter) && best.is_none_or(|(pos, _)| m.start() < pos) {
                best = Some((m.start(), letter));
            }
        }
    }
    best.map(|(_, c)| c)
}

/// Exact fraction of correct items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn new(correct: u64, total: u64) -> Self {
        assert!(correct <= total, "correct count exceeds total");
        Self { correct, total }
    }

    /// `None` when there are no items.
    pub fn ratio(&self) -> Option<Ratio<u64>> {
        (self.total > 0).then(|| Ratio::new(self.correct, self.total))
    }

    /// Percentage rounded half-up to two decimals, e.g. `"83.33"`.
    pub fn percent(&self) -> Option<String> {
        let hundredths = (self.ratio()? * Ratio::from_integer(10_000u64)).round().to_integer();
        Some(format!("{}.{:02}", hundredths / 100, hundredths % 100))
    }

    pub fn as_f64(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

impl Serialize for Accuracy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            correct: u64,
            total: u64,
            percent: Option<String>,
        }
        Repr { correct: self.correct, total: self.total, percent: self.percent() }.serialize(serializer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Base,
    PooledRag,
    RoutedRag,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::Base, Pipeline::PooledRag, Pipeline::RoutedRag];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(Pipeline::Base),
            "pooled_rag" | "pooled" => Some(Pipeline::PooledRag),
            "routed_rag" | "routed" => Some(Pipeline::RoutedRag),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub pipeline: Pipeline,
    /// `None` is an abstention.
    pub predicted: Option<char>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routed_department: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub pipeline: Pipeline,
    pub accuracy: Accuracy,
    pub records: Vec<EvalRecord>,
}

pub struct EvalContext<'a, T: Scalar> {
    pub backend: &'a dyn Backend,
    pub templates: &'a PromptTemplates,
    pub kbs: Option<&'a KnowledgeBases<T>>,
    pub retrieval: RetrievalConfig,
    pub router: Router<'a>,
    pub scorer: Scorer<'a>,
    pub workers: usize,
}

/// How a retrieved case appears in an MCQ prompt.
pub fn case_line(pair_id: &str, question: &str, answer: &str) -> String {
    format!("[{pair_id}] Q: {question} A: {answer}")
}

fn cases_block<T>(cases: &[Candidate<T>]) -> String {
    if cases.is_empty() {
        return String::new();
    }
    let lines: Vec<String> = cases.iter().map(|c| case_line(&c.pair_id, &c.question, &c.answer)).collect();
    format!("Reference cases:\n{}\n\n", lines.join("\n"))
}

fn options_block(item: &MCQItem) -> String {
    item.options.iter().map(|(k, v)| format!("{k}. {v}")).collect::<Vec<_>>().join("\n")
}

struct Retrieved<T> {
    department: Option<String>,
    cases: Vec<Candidate<T>>,
}

fn retrieve_for<T: Scalar>(item: &MCQItem, pipeline: Pipeline, ctx: &EvalContext<'_, T>) -> Result<Option<Retrieved<T>>, String> {
    let Some(kbs) = ctx.kbs else { return Ok(None) };
    let outcome = match pipeline {
        Pipeline::Base => return Ok(None),
        Pipeline::PooledRag => retrieval::retrieve_pooled(&item.question, kbs, &ctx.retrieval, ctx.scorer),
        Pipeline::RoutedRag => route::route(&item.question, kbs, ctx.router)
            .and_then(|d| retrieval::retrieve_in_department(&item.question, &d, kbs, &ctx.retrieval, ctx.scorer)),
    }
    .map_err(|e| e.to_string())?;
    Ok(Some(Retrieved { department: outcome.department, cases: outcome.cases }))
}

fn evaluate_item<T: Scalar>(item: &MCQItem, pipeline: Pipeline, ctx: &EvalContext<'_, T>) -> EvalRecord {
    let mut record = EvalRecord {
        item_id: item.id.clone(),
        pipeline,
        predicted: None,
        correct: false,
        routed_department: None,
        retrieved_ids: None,
        error: None,
    };
    let retrieved = match retrieve_for(item, pipeline, ctx) {
        Ok(r) => r,
        Err(e) => {
            record.error = Some(e);
            None
        }
    };
    let cases = match &retrieved {
        Some(r) => {
            record.routed_department = if pipeline == Pipeline::RoutedRag { r.department.clone() } else { None };
            record.retrieved_ids = Some(r.cases.iter().map(|c| c.pair_id.clone()).collect());
            cases_block(&r.cases)
        }
        None => String::new(),
    };
    let options = options_block(item);
    let prompt = adapters::templated_prompt(
        ctx.templates,
        CallSite::Mcq,
        &[("cases", cases.as_str()), ("question", item.question.as_str()), ("options", options.as_str())],
    );
    match adapters::chat_complete(&prompt, ctx.backend) {
        Ok(reply) => record.predicted = extract_answer(&reply, &item.letters()),
        Err(e) => record.error = Some(e.to_string()),
    }
    record.correct = record.predicted == Some(item.gold);
    record
}

/// Scores every item under one pipeline. Items run concurrently; records
/// come back in item order. Abstentions and failed calls count as wrong.
pub fn run_mcq_eval<T: Scalar>(items: &[MCQItem], pipeline: Pipeline, ctx: &EvalContext<'_, T>) -> Result<EvalResult, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if pipeline != Pipeline::Base && ctx.kbs.is_none() {
        return Err(EvalError::MissingKnowledgeBases);
    }
    for item in items {
        item.validate()?;
    }
    let records = crate::par::ordered_map(items, ctx.workers, |item| evaluate_item(item, pipeline, ctx));
    let correct = records.iter().filter(|r| r.correct).count() as u64;
    Ok(EvalResult { pipeline, accuracy: Accuracy::new(correct, records.len() as u64), records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterScript, MockBackend};

    const ABCD: [char; 4] = ['A', 'B', 'C', 'D'];

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_answer("The answer is B.", &ABCD), Some('B'));
        assert_eq!(extract_answer("A bandage was applied", &ABCD), None);
        assert_eq!(extract_answer("C", &ABCD), Some('C'));
        assert_eq!(extract_answer("I pick (d) here", &ABCD), Some('D'));
        assert_eq!(extract_answer("Option A: because...", &ABCD), Some('A'));
        assert_eq!(extract_answer("E. is not offered; B. is", &ABCD), Some('B'));
        assert_eq!(extract_answer("via. nothing", &ABCD), None);
        assert_eq!(extract_answer("", &ABCD), None);
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(Accuracy::new(17, 20).percent().unwrap(), "85.00");
        assert_eq!(Accuracy::new(25, 30).percent().unwrap(), "83.33");
        assert_eq!(Accuracy::new(2, 3).percent().unwrap(), "66.67");
        assert_eq!(Accuracy::new(1, 8).percent().unwrap(), "12.50");
        assert_eq!(Accuracy::new(0, 0).percent(), None);
        assert_eq!(Accuracy::new(17, 20).ratio().unwrap(), Ratio::new(17, 20));
    }

    #[test]
    fn medqa_parsing() {
        let text = r#"{"question":"q1","options":{"A":"x","B":"y"},"answer_idx":"B"}
{"id":"z","question":"q2","options":{"A":"x","B":"y","C":"w"},"answer_idx":"c","answer":"w"}"#;
        let items = parse_medqa(text).unwrap();
        assert_eq!(items[0].id, "q1");
        assert_eq!(items[1].gold, 'C');
        assert!(parse_medqa(r#"{"question":"q","options":{"A":"x"},"answer_idx":"A"}"#).is_err());
        assert!(parse_medqa(r#"{"question":"q","options":{"A":"x","B":"y"},"answer_idx":"F"}"#).is_err());
    }

    fn item(i: usize, gold: char) -> MCQItem {
        let options = ABCD.iter().map(|c| (*c, format!("option {c}"))).collect();
        MCQItem { id: format!("i{i}"), question: format!("question number {i}"), options, gold }
    }

    #[test]
    fn gibberish_abstains() {
        let backend = MockBackend::new(AdapterScript::new("zzz qqq"));
        let templates = PromptTemplates::default();
        let ctx: EvalContext<'_, f64> = EvalContext {
            backend: &backend,
            templates: &templates,
            kbs: None,
            retrieval: RetrievalConfig::default(),
            router: Router::Centroid,
            scorer: Scorer::Reference,
            workers: 4,
        };
        let items: Vec<MCQItem> = (0..5).map(|i| item(i, 'A')).collect();
        let out = run_mcq_eval(&items, Pipeline::Base, &ctx).unwrap();
        assert_eq!(out.accuracy, Accuracy::new(0, 5));
        assert!(out.records.iter().all(|r| r.predicted.is_none() && !r.correct));
        assert!(matches!(run_mcq_eval(&[], Pipeline::Base, &ctx), Err(EvalError::EmptyDataset)));
        assert!(matches!(run_mcq_eval(&items, Pipeline::RoutedRag, &ctx), Err(EvalError::MissingKnowledgeBases)));
    }
}
