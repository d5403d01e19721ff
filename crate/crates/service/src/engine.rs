//! Shared state behind the HTTP routes and the CLI: knowledge bases, live
//! sessions, the ledger, the execution log and evaluation runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, TryLockError};

use mmds_core::adapters::Backend;
use mmds_core::agent::{
    self, AdvanceInput, AgentDecision, AnalysisAttachment, AssessPolicy, ConsultDeps, ConsultationSession, DecisionKind,
    MedicalReport, RulePolicy, SessionState,
};
use mmds_core::clock::{Clock, SystemClock};
use mmds_core::evalharness::{self, EvalContext, EvalResult, MCQItem, Pipeline};
use mmds_core::ingest::{self, IngestSummary, KnowledgeBases, QAPair, SourceDocument, Taxonomy, INDEX_MANIFEST};
use mmds_core::ledger::{ExecutionLog, Ledger};
use mmds_core::retrieval::embed::{Embedder, ReferenceEmbedder};
use mmds_core::retrieval::{self, RetrievalMode, RetrievalOutcome, Router, Scorer};
use mmds_core::templates::PromptTemplates;
use mmds_core::videoparse::{self, VideoAnalysis, VideoContext, VideoInput};
use mmds_core::KnowledgeBaseSet;
use serde::{Deserialize, Serialize};

use crate::config::{AssessKind, BackendSet, EngineConfig, RouterKind, ScorerKind};
use crate::error::ApiError;

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const LOG_FILE: &str = "execution_log.jsonl";
pub const KB_DIR: &str = "kb";
pub const SESSIONS_DIR: &str = "sessions";

#[derive(Clone)]
pub struct EngineBackends {
    pub generation: Arc<dyn Backend>,
    pub classification: Arc<dyn Backend>,
    pub routing: Arc<dyn Backend>,
    pub report: Arc<dyn Backend>,
    pub frame_analysis: Arc<dyn Backend>,
}

impl EngineBackends {
    pub fn from_config(set: &BackendSet) -> Result<Self, ApiError> {
        let build = |site: &str, cfg: &mmds_core::adapters::BackendConfig| {
            cfg.build().map_err(|e| ApiError::bad_request(format!("backend {site}: {e}")))
        };
        Ok(Self {
            generation: build("generation", &set.generation)?,
            classification: build("classification", &set.classification)?,
            routing: build("routing", &set.routing)?,
            report: build("report", &set.report)?,
            frame_analysis: build("frame_analysis", &set.frame_analysis)?,
        })
    }

    /// The same backend at every call site.
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        Self {
            generation: backend.clone(),
            classification: backend.clone(),
            routing: backend.clone(),
            report: backend.clone(),
            frame_analysis: backend,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    /// Server-side corpus path (directory of .txt, JSONL or text file).
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Raw documents; pairs are generated and classified by the backends.
    #[serde(default)]
    pub documents: Option<Vec<SourceDocument>>,
    /// Already labeled pairs, stored as given.
    #[serde(default)]
    pub pairs: Option<Vec<QAPair>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub patient_id: String,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageResponse {
    pub session_id: String,
    pub state: SessionState,
    pub decision: AgentDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<MedicalReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub query: String,
    #[serde(default)]
    pub mode: Option<RetrievalMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerStatus {
    pub valid: bool,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub items: Option<Vec<MCQItem>>,
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRun {
    pub run_id: String,
    pub pipeline: Pipeline,
    pub status: RunStatus,
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<EvalResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn lock<X>(m: &Mutex<X>) -> MutexGuard<'_, X> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

pub struct Engine {
    config: EngineConfig,
    templates: PromptTemplates,
    backends: EngineBackends,
    kbs: RwLock<Arc<KnowledgeBaseSet>>,
    ingest_gate: Mutex<()>,
    ledger: Mutex<Ledger>,
    log: Mutex<ExecutionLog>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<ConsultationSession>>>>,
    session_seq: AtomicU64,
    eval_runs: Mutex<BTreeMap<String, EvalRun>>,
    eval_seq: AtomicU64,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("data_dir", &self.config.data_dir).finish_non_exhaustive()
    }
}

impl Engine {
    /// Validates `config`, builds its backends and opens the data directory.
    pub fn start(config: EngineConfig) -> Result<Self, ApiError> {
        config.validate()?;
        let backends = EngineBackends::from_config(&config.backends)?;
        Self::with_backends(config, backends, Arc::new(SystemClock))
    }

    pub fn with_backends(config: EngineConfig, backends: EngineBackends, clock: Arc<dyn Clock>) -> Result<Self, ApiError> {
        config.validate()?;
        let startup = |what: &str, e: &dyn std::fmt::Display| ApiError::internal(format!("{what}: {e}"));
        let templates = match &config.templates_dir {
            Some(dir) => PromptTemplates::load_dir(dir).map_err(|e| startup("templates", &e))?,
            None => PromptTemplates::default(),
        };
        let taxonomy = match &config.taxonomy {
            Some(path) => Taxonomy::from_toml_file(path)?,
            None => Taxonomy::default(),
        };
        fs::create_dir_all(config.data_dir.join(SESSIONS_DIR)).map_err(|e| startup("data directory", &e))?;
        let embedder: Arc<dyn Embedder<f64>> = Arc::new(ReferenceEmbedder { dim: config.embedding_dim });
        let kb_dir = config.data_dir.join(KB_DIR);
        let kbs = if kb_dir.join(INDEX_MANIFEST).is_file() {
            KnowledgeBases::load(&kb_dir, embedder)?
        } else {
            KnowledgeBases::new(taxonomy, embedder)
        };
        let ledger = Ledger::open(&config.data_dir.join(LEDGER_FILE))?;
        let log = ExecutionLog::open(&config.data_dir.join(LOG_FILE))?;
        let sessions = load_sessions(&config.data_dir.join(SESSIONS_DIR))?;
        let session_seq = AtomicU64::new(sessions.len() as u64);
        Ok(Self {
            config,
            templates,
            backends,
            kbs: RwLock::new(Arc::new(kbs)),
            ingest_gate: Mutex::new(()),
            ledger: Mutex::new(ledger),
            log: Mutex::new(log),
            sessions: Mutex::new(sessions.into_iter().map(|s| (s.session_id.clone(), Arc::new(Mutex::new(s)))).collect()),
            session_seq,
            eval_runs: Mutex::new(BTreeMap::new()),
            eval_seq: AtomicU64::new(0),
            clock,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn backends(&self) -> &EngineBackends {
        &self.backends
    }

    /// Current knowledge base snapshot. Ingest swaps in a new one; holders
    /// of an older snapshot keep reading it unchanged.
    pub fn kbs(&self) -> Arc<KnowledgeBaseSet> {
        self.kbs.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn router(&self) -> Router<'_> {
        match self.config.router {
            RouterKind::Centroid => Router::Centroid,
            RouterKind::Adapter => Router::Adapter { backend: &*self.backends.routing, templates: &self.templates },
        }
    }

    fn scorer(&self) -> Scorer<'_> {
        match self.config.scorer {
            ScorerKind::Reference => Scorer::Reference,
            ScorerKind::Adapter => Scorer::Adapter(&*self.backends.classification),
        }
    }

    fn assess_policy(&self) -> AssessPolicy<'_> {
        let rules = RulePolicy { min_tokens: self.config.min_tokens };
        match self.config.assess {
            AssessKind::Rules => AssessPolicy::Rules(rules),
            AssessKind::Adapter => AssessPolicy::Adapter { backend: &*self.backends.generation, rules },
        }
    }

    pub fn ingest(&self, request: IngestRequest) -> Result<IngestSummary, ApiError> {
        let given = [request.corpus.is_some(), request.documents.is_some(), request.pairs.is_some()];
        if given.iter().filter(|g| **g).count() != 1 {
            return Err(ApiError::bad_request("give exactly one of corpus, documents or pairs"));
        }
        let _gate = lock(&self.ingest_gate);
        let mut next = (*self.kbs()).clone();
        let summary = if let Some(pairs) = request.pairs {
            let count = pairs.len();
            let added = next.upsert_all(pairs)?;
            IngestSummary { documents: count, pairs: added, departments: next.sizes(), skipped: Vec::new() }
        } else {
            let documents = match request.corpus {
                Some(path) => ingest::load_corpus(&path)?,
                None => request.documents.unwrap_or_default(),
            };
            ingest::ingest_documents(
                &documents,
                &mut next,
                &*self.backends.generation,
                &*self.backends.classification,
                &self.templates,
            )?
        };
        next.save(&self.config.data_dir.join(KB_DIR))?;
        *self.kbs.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(summary)
    }

    pub fn retrieve(&self, request: &RetrieveRequest) -> Result<RetrievalOutcome<f64>, ApiError> {
        let mut config = self.config.retrieval;
        if let Some(mode) = request.mode {
            config.mode = mode;
        }
        Ok(retrieval::retrieve(&request.query, &self.kbs(), &config, self.router(), self.scorer())?)
    }

    pub fn create_session(&self, request: SessionRequest) -> Result<ConsultationSession, ApiError> {
        if request.patient_id.trim().is_empty() {
            return Err(ApiError::bad_request("patient_id is empty"));
        }
        let mut sessions = lock(&self.sessions);
        let id = match request.session_id {
            Some(id) if !valid_id(&id) => return Err(ApiError::bad_request(format!("invalid session id `{id}`"))),
            Some(id) if sessions.contains_key(&id) => return Err(ApiError::conflict(format!("session `{id}` exists"))),
            Some(id) => id,
            None => loop {
                let candidate = format!("S{:06}", self.session_seq.fetch_add(1, Ordering::Relaxed));
                if !sessions.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        let session = ConsultationSession::new(id.clone(), request.patient_id);
        self.snapshot(&session)?;
        sessions.insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn session_handle(&self, id: &str) -> Result<Arc<Mutex<ConsultationSession>>, ApiError> {
        lock(&self.sessions).get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }

    /// Runs `f` as the single writer of session `id`; a concurrent writer
    /// gets a conflict instead of waiting.
    fn with_session<R>(&self, id: &str, f: impl FnOnce(&mut ConsultationSession) -> Result<R, ApiError>) -> Result<R, ApiError> {
        let handle = self.session_handle(id)?;
        let mut session = match handle.try_lock() {
            Ok(guard) => guard,
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
            Err(TryLockError::WouldBlock) => {
                return Err(ApiError::conflict(format!("session `{id}` is busy with another request")))
            }
        };
        let result = f(&mut session);
        self.snapshot(&session)?;
        result
    }

    pub fn session(&self, id: &str) -> Result<ConsultationSession, ApiError> {
        let handle = self.session_handle(id)?;
        let session = handle.try_lock().map_err(|_| ApiError::conflict(format!("session `{id}` is busy")))?;
        Ok(session.clone())
    }

    /// Appends the message, assesses, and consults once the information is
    /// sufficient.
    pub fn post_message(&self, id: &str, request: MessageRequest) -> Result<MessageResponse, ApiError> {
        self.with_session(id, |session| {
            agent::advance(session, AdvanceInput::UserText(request.text), &*self.clock)?;
            let decision = agent::assess(session, self.assess_policy(), &self.templates)?;
            let report = if decision.kind == DecisionKind::Sufficient {
                let kbs = self.kbs();
                let deps = ConsultDeps {
                    kbs: &kbs,
                    retrieval: &self.config.retrieval,
                    router: self.router(),
                    scorer: self.scorer(),
                    backend: &*self.backends.report,
                    templates: &self.templates,
                    ledger: &self.ledger,
                    log: &self.log,
                    clock: &*self.clock,
                    history_budget: self.config.history_budget,
                };
                Some(agent::consult(session, &deps)?)
            } else {
                session.record_decision(&decision, &*self.clock)?;
                None
            };
            Ok(MessageResponse { session_id: session.session_id.clone(), state: session.state, decision, report })
        })
    }

    /// Analyzes a manifest or frame listing. With `session_id` the result is
    /// attached to that session and its conversation feeds the prompts.
    pub fn analyze_video(&self, input: &VideoInput, session_id: Option<&str>) -> Result<VideoAnalysis, ApiError> {
        let run = |history: &[agent::Turn]| -> Result<VideoAnalysis, ApiError> {
            let ctx = VideoContext {
                backend: &*self.backends.frame_analysis,
                templates: &self.templates,
                history,
                summarize_with_backend: self.config.video_summarize_with_backend,
                workers: self.config.workers,
            };
            Ok(videoparse::analyze_video(input, &ctx)?)
        };
        match session_id {
            None => run(&[]),
            Some(id) => self.with_session(id, |session| {
                let analysis = run(&session.turns)?;
                agent::advance(session, AdvanceInput::Attachment(AnalysisAttachment::from_video(&analysis)), &*self.clock)?;
                Ok(analysis)
            }),
        }
    }

    /// Re-reads the ledger file and checks the whole chain.
    pub fn verify_ledger(&self) -> Result<LedgerStatus, ApiError> {
        let _held = lock(&self.ledger);
        let on_disk = Ledger::open(&self.config.data_dir.join(LEDGER_FILE))?;
        Ok(LedgerStatus { valid: on_disk.verify_chain(), entries: on_disk.lines().len() })
    }

    pub fn history(&self, patient_id: &str) -> Vec<MedicalReport> {
        lock(&self.ledger).history_for(patient_id)
    }

    pub fn execution_log(&self) -> MutexGuard<'_, ExecutionLog> {
        lock(&self.log)
    }

    fn eval_items(request: &EvalRequest) -> Result<Vec<MCQItem>, ApiError> {
        match (&request.dataset, &request.items) {
            (Some(path), None) => Ok(evalharness::load_medqa(path)?),
            (None, Some(items)) => Ok(items.clone()),
            _ => Err(ApiError::bad_request("give exactly one of dataset or items")),
        }
    }

    pub fn evaluate(&self, items: &[MCQItem], pipeline: Pipeline) -> Result<EvalResult, ApiError> {
        let kbs = self.kbs();
        let ctx = EvalContext {
            backend: &*self.backends.generation,
            templates: &self.templates,
            kbs: Some(&kbs),
            retrieval: self.config.retrieval,
            router: self.router(),
            scorer: self.scorer(),
            workers: self.config.workers,
        };
        Ok(evalharness::run_mcq_eval(items, pipeline, &ctx)?)
    }

    /// Small datasets complete before returning; larger ones return a
    /// running record to poll with [`Engine::eval_run`].
    pub fn start_eval(self: &Arc<Self>, request: EvalRequest) -> Result<EvalRun, ApiError> {
        let items = Self::eval_items(&request)?;
        let run_id = format!("E{:06}", self.eval_seq.fetch_add(1, Ordering::Relaxed));
        let mut run =
            EvalRun { run_id: run_id.clone(), pipeline: request.pipeline, status: RunStatus::Running, items: items.len(), result: None, error: None };
        if items.len() <= self.config.eval_async_threshold {
            run.result = Some(self.evaluate(&items, request.pipeline)?);
            run.status = RunStatus::Completed;
            lock(&self.eval_runs).insert(run_id, run.clone());
            return Ok(run);
        }
        lock(&self.eval_runs).insert(run_id.clone(), run.clone());
        let engine = Arc::clone(self);
        std::thread::spawn(move || {
            let outcome = engine.evaluate(&items, request.pipeline);
            let mut runs = lock(&engine.eval_runs);
            if let Some(run) = runs.get_mut(&run_id) {
                match outcome {
                    Ok(result) => {
                        run.result = Some(result);
                        run.status = RunStatus::Completed;
                    }
                    Err(e) => {
                        run.error = Some(e.message);
                        run.status = RunStatus::Failed;
                    }
                }
            }
        });
        Ok(run)
    }

    pub fn eval_run(&self, run_id: &str) -> Result<EvalRun, ApiError> {
        lock(&self.eval_runs).get(run_id).cloned().ok_or_else(|| ApiError::not_found(format!("no eval run `{run_id}`")))
    }

    fn snapshot(&self, session: &ConsultationSession) -> Result<(), ApiError> {
        let path = self.config.data_dir.join(SESSIONS_DIR).join(format!("{}.json", session.session_id));
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec(session).map_err(|e| ApiError::internal(e.to_string()))?;
        fs::write(&tmp, body).and_then(|_| fs::rename(&tmp, &path)).map_err(|e| ApiError::internal(format!("session snapshot: {e}")))
    }
}

fn load_sessions(dir: &Path) -> Result<Vec<ConsultationSession>, ApiError> {
    let mut sessions = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| ApiError::internal(format!("sessions: {e}")))?;
    for entry in entries.flatten() {
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
            let session: ConsultationSession =
                serde_json::from_str(&text).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
            sessions.push(session);
        }
    }
    Ok(sessions)
}
