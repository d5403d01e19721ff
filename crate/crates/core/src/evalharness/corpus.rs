//! Seeded synthetic corpora with known ground truth.
//!
//! Words are short strings of CJK ideographs. Every department draws its
//! vocabulary from its own code-point block, so character n-grams never
//! cross departments; per-query topic words and shared filler words come
//! from two further blocks.
//!
//! The overlap corpus plants conflicts: for each gold document of department
//! D, two documents in every other department repeat the query wording
//! exactly but carry their own department's answer. Lexical reranking
//! prefers those copies over the gold document, so pooled retrieval pushes
//! the gold case out of the top five while routing to D keeps it first.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{case_line, EvalError, MCQItem};
use crate::adapters::{AdapterError, Backend, ChatMessage, Transcript};
use crate::ingest::{Department, QAPair, Taxonomy};
use crate::retrieval::embed::reference_embed;
use crate::retrieval::rerank::token_f1;

const DEPT_BLOCK_START: u32 = 0x4E00;
const DEPT_BLOCK_SIZE: u32 = 0x200;
const MAX_DEPARTMENTS: usize = 12;
const TOPIC_BLOCK_START: u32 = 0x7000;
const TOPIC_BLOCK_SIZE: u32 = 0x800;
const FILLER_BLOCK_START: u32 = 0x8000;
const FILLER_BLOCK_SIZE: u32 = 0x200;

const CORE_VOCAB: usize = 60;
const FILLER_VOCAB: usize = 30;
const CONFLICTS_PER_FOREIGN_DEPT: usize = 2;
const TOPIC_WORDS: usize = 2;
const GOLD_ANCHORS: usize = 5;
const QUERY_ANCHORS: usize = 3;
const REGULAR_QUERIES_PER_DEPT: usize = 10;
const MIN_REGULAR_DOCS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub id: String,
    pub text: String,
    pub department: String,
    /// The planted document that answers this query.
    pub gold_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub taxonomy: Taxonomy,
    pub pairs: Vec<QAPair>,
    pub queries: Vec<SyntheticQuery>,
    /// Multiple-choice items for the queries that have planted conflicts.
    pub mcq: Vec<MCQItem>,
}

impl SyntheticCorpus {
    pub fn find_pair(&self, id: &str) -> Option<&QAPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// Label histogram of the pairs.
    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.pairs {
            *counts.entry(p.department.clone().unwrap_or_default()).or_default() += 1;
        }
        counts
    }

    /// Writes `corpus.jsonl` (labeled pairs) and `queries.jsonl`, plus
    /// `mcq.jsonl` in MedQA layout when there are MCQ items.
    pub fn write_dir(&self, dir: &Path) -> Result<(), EvalError> {
        use std::fmt::Write as _;
        std::fs::create_dir_all(dir)?;
        let to_lines = |values: Vec<serde_json::Value>| {
            values.into_iter().fold(String::new(), |mut acc, v| {
                let _ = writeln!(acc, "{v}");
                acc
            })
        };
        let pairs = self.pairs.iter().map(|p| serde_json::to_value(p).expect("pair serializes")).collect();
        std::fs::write(dir.join("corpus.jsonl"), to_lines(pairs))?;
        let queries = self.queries.iter().map(|q| serde_json::to_value(q).expect("query serializes")).collect();
        std::fs::write(dir.join("queries.jsonl"), to_lines(queries))?;
        if !self.mcq.is_empty() {
            let items = self
                .mcq
                .iter()
                .map(|m| {
                    let options: BTreeMap<String, &String> = m.options.iter().map(|(k, v)| (k.to_string(), v)).collect();
                    serde_json::json!({"id": m.id, "question": m.question, "options": options, "answer_idx": m.gold.to_string()})
                })
                .collect();
            std::fs::write(dir.join("mcq.jsonl"), to_lines(items))?;
        }
        Ok(())
    }
}

struct WordSource {
    start: u32,
    size: u32,
}

impl WordSource {
    fn department(i: usize) -> Self {
        Self { start: DEPT_BLOCK_START + i as u32 * DEPT_BLOCK_SIZE, size: DEPT_BLOCK_SIZE }
    }

    fn word(&self, rng: &mut ChaCha8Rng) -> String {
        let len = rng.random_range(2..=3);
        (0..len).map(|_| char::from_u32(self.start + rng.random_range(0..self.size)).expect("CJK code point")).collect()
    }

    fn unique_words(&self, rng: &mut ChaCha8Rng, count: usize, used: &mut BTreeSet<String>) -> Vec<String> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let w = self.word(rng);
            if used.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &'a [String], amount: usize) -> Vec<&'a String> {
    index::sample(rng, words.len(), amount).into_iter().map(|i| &words[i]).collect()
}

fn sentence(rng: &mut ChaCha8Rng, mut words: Vec<&String>) -> String {
    words.shuffle(rng);
    words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ")
}

fn taxonomy_for(n: usize) -> Result<Taxonomy, EvalError> {
    if !(2..=MAX_DEPARTMENTS).contains(&n) {
        return Err(EvalError::InvalidParams(format!("department count must be in 2..={MAX_DEPARTMENTS}")));
    }
    let departments: Vec<Department> = Taxonomy::default().departments()[..n].to_vec();
    Taxonomy::new(departments).map_err(|e| EvalError::InvalidParams(e.to_string()))
}

/// Three-word answer unique across the corpus.
fn unique_answer(rng: &mut ChaCha8Rng, core: &[String], used: &mut BTreeSet<String>) -> String {
    loop {
        let words = pick(rng, core, 3);
        let answer = words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ");
        if used.insert(answer.clone()) {
            return answer;
        }
    }
}

/// Labeled pairs, scripted queries and MCQ items for the routed-vs-pooled
/// comparison. Each department holds `docs_per_dept` documents, of which
/// `round(overlap * docs_per_dept)` are planted conflicts belonging to
/// other departments' gold documents.
pub fn make_overlap_corpus(seed: u64, n: usize, docs_per_dept: usize, overlap: f64) -> Result<SyntheticCorpus, EvalError> {
    let taxonomy = taxonomy_for(n)?;
    if !(0.0..1.0).contains(&overlap) {
        return Err(EvalError::InvalidParams("overlap fraction must lie in [0, 1)".into()));
    }
    let hosted = (overlap * docs_per_dept as f64).round() as usize;
    let per_gold_per_dept = CONFLICTS_PER_FOREIGN_DEPT;
    let golds = hosted / (per_gold_per_dept * (n - 1));
    if hosted > 0 && golds == 0 {
        return Err(EvalError::InvalidParams("overlap too small to plant a single conflict set".into()));
    }
    let conflicts_hosted = golds * per_gold_per_dept * (n - 1);
    let regular = docs_per_dept.saturating_sub(golds + conflicts_hosted);
    if regular < MIN_REGULAR_DOCS {
        return Err(EvalError::InvalidParams(format!("need at least {MIN_REGULAR_DOCS} regular documents per department")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = taxonomy.ids();
    let mut used_words = BTreeSet::new();
    let core: Vec<Vec<String>> =
        (0..n).map(|i| WordSource::department(i).unique_words(&mut rng, CORE_VOCAB, &mut used_words)).collect();
    let filler = WordSource { start: FILLER_BLOCK_START, size: FILLER_BLOCK_SIZE }.unique_words(&mut rng, FILLER_VOCAB, &mut used_words);
    let topic_source = WordSource { start: TOPIC_BLOCK_START, size: TOPIC_BLOCK_SIZE };
    let mut used_answers = BTreeSet::new();

    let mut by_dept: Vec<Vec<QAPair>> = vec![Vec::new(); n];
    let mut queries = Vec::new();
    let mut mcq = Vec::new();
    let mut conflict_counter = vec![0usize; n];
    for d in 0..n {
        for g in 0..golds {
            let topic = topic_source.unique_words(&mut rng, TOPIC_WORDS, &mut used_words);
            let anchors = pick(&mut rng, &core[d], GOLD_ANCHORS);
            let mut question_words: Vec<&String> = topic.iter().collect();
            question_words.extend(anchors.iter().copied());
            let question = sentence(&mut rng, question_words);
            let answer = unique_answer(&mut rng, &core[d], &mut used_answers);
            let gold_id = format!("{}-g{g:03}", ids[d]);
            by_dept[d].push(QAPair::new(&gold_id, question, &answer).in_department(&ids[d]));

            let mut query_words: Vec<&String> = topic.iter().collect();
            query_words.extend(anchors[..QUERY_ANCHORS].iter().copied());
            let query_text = sentence(&mut rng, query_words.clone());
            let mut distractors = Vec::new();
            for e in (0..n).filter(|e| *e != d) {
                for r in 0..per_gold_per_dept {
                    let conflict_q = sentence(&mut rng, query_words.clone());
                    let conflict_a = unique_answer(&mut rng, &core[e], &mut used_answers);
                    let id = format!("{}-x{:03}", ids[e], conflict_counter[e]);
                    conflict_counter[e] += 1;
                    if r == 0 {
                        distractors.push(conflict_a.clone());
                    }
                    by_dept[e].push(QAPair::new(id, conflict_q, conflict_a).in_department(&ids[e]));
                }
            }
            let query_id = format!("{}-q{g:03}", ids[d]);
            queries.push(SyntheticQuery { id: query_id.clone(), text: query_text.clone(), department: ids[d].clone(), gold_id });

            distractors.truncate(4);
            let mut options: Vec<String> = vec![answer];
            options.extend(distractors);
            let gold_text = options[0].clone();
            options.shuffle(&mut rng);
            let letters = ['A', 'B', 'C', 'D', 'E'];
            let gold = letters[options.iter().position(|o| *o == gold_text).expect("gold present")];
            mcq.push(MCQItem {
                id: query_id,
                question: query_text,
                options: letters.iter().copied().zip(options).collect(),
                gold,
            });
        }
    }
    for d in 0..n {
        let mut regular_docs = Vec::with_capacity(regular);
        for r in 0..regular {
            let core_words = pick(&mut rng, &core[d], 6);
            let mut words = core_words.clone();
            words.extend(pick(&mut rng, &filler, 2));
            let question = sentence(&mut rng, words);
            let answer = unique_answer(&mut rng, &core[d], &mut used_answers);
            let id = format!("{}-r{r:03}", ids[d]);
            regular_docs.push((QAPair::new(&id, question, answer).in_department(&ids[d]), core_words));
        }
        for (q, j) in index::sample(&mut rng, regular, REGULAR_QUERIES_PER_DEPT.min(regular)).into_iter().enumerate() {
            let (doc, core_words) = &regular_docs[j];
            let words = pick(&mut rng, &core_words.iter().map(|w| (*w).clone()).collect::<Vec<_>>(), 4).into_iter().cloned().collect::<Vec<_>>();
            let text = sentence(&mut rng, words.iter().collect());
            queries.push(SyntheticQuery {
                id: format!("{}-rq{q:03}", ids[d]),
                text,
                department: ids[d].clone(),
                gold_id: doc.id.clone(),
            });
        }
        by_dept[d].extend(regular_docs.into_iter().map(|(p, _)| p));
    }
    let pairs = by_dept.into_iter().flatten().collect();
    Ok(SyntheticCorpus { taxonomy, pairs, queries, mcq })
}

/// Departments with fully disjoint vocabularies and held-out queries drawn
/// from each department's vocabulary.
pub fn make_disjoint_corpus(seed: u64, n: usize, docs_per_dept: usize, queries_per_dept: usize) -> Result<SyntheticCorpus, EvalError> {
    let taxonomy = taxonomy_for(n)?;
    if docs_per_dept < 2 {
        return Err(EvalError::InvalidParams("need at least two documents per department".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = taxonomy.ids();
    let mut used_words = BTreeSet::new();
    let mut used_answers = BTreeSet::new();
    let mut pairs = Vec::new();
    let mut queries = Vec::new();
    for (d, dept) in ids.iter().enumerate() {
        let core = WordSource::department(d).unique_words(&mut rng, CORE_VOCAB, &mut used_words);
        for r in 0..docs_per_dept {
            let words = pick(&mut rng, &core, 6);
            let question = sentence(&mut rng, words);
            let answer = unique_answer(&mut rng, &core, &mut used_answers);
            pairs.push(QAPair::new(format!("{dept}-r{r:03}"), question, answer).in_department(dept));
        }
        for q in 0..queries_per_dept {
            let words = pick(&mut rng, &core, 4);
            let text = sentence(&mut rng, words);
            queries.push(SyntheticQuery { id: format!("{dept}-hq{q:03}"), text, department: dept.clone(), gold_id: String::new() });
        }
    }
    Ok(SyntheticCorpus { taxonomy, pairs, queries, mcq: Vec::new() })
}

struct EchoEntry {
    question_line: String,
    gold_case: String,
    gold: char,
}

/// Scripted MCQ answerer: replies with the gold letter exactly when the
/// gold document's case line is present in the prompt, otherwise with a
/// reply that extracts as an abstention.
pub struct RetrievalEchoBackend {
    entries: Vec<EchoEntry>,
}

impl RetrievalEchoBackend {
    pub fn new(corpus: &SyntheticCorpus) -> Self {
        let gold_of: BTreeMap<&str, &str> = corpus.queries.iter().map(|q| (q.id.as_str(), q.gold_id.as_str())).collect();
        let entries = corpus
            .mcq
            .iter()
            .filter_map(|item| {
                let pair = corpus.find_pair(gold_of.get(item.id.as_str())?)?;
                Some(EchoEntry {
                    question_line: format!("Question: {}\n", item.question),
                    gold_case: case_line(&pair.id, &pair.question, &pair.answer),
                    gold: item.gold,
                })
            })
            .collect();
        Self { entries }
    }
}

impl Backend for RetrievalEchoBackend {
    fn name(&self) -> &str {
        "retrieval-echo"
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, AdapterError> {
        let prompt = messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let hit = self.entries.iter().find(|e| prompt.contains(&e.question_line)).filter(|e| prompt.contains(&e.gold_case));
        Ok(match hit {
            Some(e) => format!("The answer is {}.", e.gold),
            None => "Not enough information to decide.".into(),
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, AdapterError> {
        reference_embed::<f64>(text, crate::DEFAULT_DIM)
            .map(|v| v.values().to_vec())
            .map_err(|e| AdapterError::MalformedResponse(e.to_string()))
    }

    fn score_pair(&self, query: &str, document: &str) -> Result<f64, AdapterError> {
        Ok(token_f1::<f64>(query, document))
    }

    fn transcribe(&self, _audio: &Path) -> Result<Transcript, AdapterError> {
        Err(AdapterError::BackendUnavailable { attempts: 0, reason: "echo backend has no speech model".into() })
    }

    fn describe_image(&self, _image: &Path, _messages: &[ChatMessage]) -> Result<String, AdapterError> {
        Err(AdapterError::BackendUnavailable { attempts: 0, reason: "echo backend has no vision model".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_corpus_shape() {
        let c = make_overlap_corpus(7, 4, 200, 0.3).unwrap();
        assert_eq!(c.pairs.len(), 800);
        assert!(c.label_counts().values().all(|n| *n == 200));
        let conflicts_per_dept = c.pairs.iter().filter(|p| p.id.contains("-x") && p.department.as_deref() == Some("internal")).count();
        assert_eq!(conflicts_per_dept, 60);
        assert_eq!(c.mcq.len(), 40);
        assert_eq!(c.queries.len(), 80);
        let ids: BTreeSet<_> = c.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids.len(), c.pairs.len());
        for item in &c.mcq {
            item.validate().unwrap();
            assert_eq!(item.options.len(), 4);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = serde_json::to_string(&make_overlap_corpus(11, 3, 60, 0.2).unwrap()).unwrap();
        let b = serde_json::to_string(&make_overlap_corpus(11, 3, 60, 0.2).unwrap()).unwrap();
        let c = serde_json::to_string(&make_overlap_corpus(12, 3, 60, 0.2).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_overlap_has_no_conflicts() {
        let c = make_overlap_corpus(7, 4, 50, 0.0).unwrap();
        assert!(c.mcq.is_empty());
        assert!(c.pairs.iter().all(|p| p.id.contains("-r")));
        assert_eq!(c.queries.len(), 40);
    }

    #[test]
    fn invalid_parameters() {
        assert!(make_overlap_corpus(1, 1, 100, 0.3).is_err());
        assert!(make_overlap_corpus(1, 4, 100, 1.0).is_err());
        assert!(make_overlap_corpus(1, 4, 20, 0.9).is_err());
        assert!(make_overlap_corpus(1, 4, 100, 0.01).is_err());
        assert!(make_disjoint_corpus(1, 13, 10, 1).is_err());
    }

    #[test]
    fn echo_requires_gold_case() {
        let c = make_overlap_corpus(3, 3, 60, 0.2).unwrap();
        let echo = RetrievalEchoBackend::new(&c);
        let item = &c.mcq[0];
        let gold = c.find_pair(&c.queries[0].gold_id).unwrap();
        let with = format!("{}\nQuestion: {}\nOptions:", case_line(&gold.id, &gold.question, &gold.answer), item.question);
        let without = format!("Question: {}\nOptions:", item.question);
        assert_eq!(echo.chat(&[ChatMessage::user(with)]).unwrap(), format!("The answer is {}.", item.gold));
        let reply = echo.chat(&[ChatMessage::user(without)]).unwrap();
        assert_eq!(super::super::extract_answer(&reply, &item.letters()), None);
    }
}
