mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::{Method, StatusCode};
use common::*;
use mmds_core::adapters::{AdapterError, AdapterScript, Backend, ChatMessage, MockBackend, Transcript};
use mmds_core::agent::{self, AdvanceInput, AssessPolicy, ConsultDeps, ConsultationSession, RulePolicy};
use mmds_core::evalharness::{self, EvalContext, Pipeline};
use mmds_core::ingest::{self, build_kbs, IngestSummary, KnowledgeBases, SourceDocument, Taxonomy};
use mmds_core::ledger::{ExecutionLog, Ledger};
use mmds_core::retrieval::embed::ReferenceEmbedder;
use mmds_core::retrieval::{self, RetrievalConfig, RetrievalMode, Router, Scorer};
use mmds_core::templates::PromptTemplates;
use mmds_core::videoparse::{self, ObservationManifest, VideoContext, VideoInput};
use mmds_service::engine::{EngineBackends, LedgerStatus, MessageResponse};
use mmds_service::http::router;
use serde_json::{json, Value};

const CARDIAC: &str = "I have crushing chest pain radiating to my left arm and I get breathless when lying flat at night";
const CARDIAC_AGAIN: &str = "the chest pain came back this morning with palpitations and my blood pressure was high";

fn library_kbs() -> mmds_core::KnowledgeBaseSet {
    build_kbs(pairs(), &Taxonomy::default(), Arc::new(ReferenceEmbedder::default())).unwrap()
}

async fn seeded(dir: &std::path::Path) -> (Arc<mmds_service::Engine>, axum::Router) {
    let engine = engine(dir);
    let app = router(engine.clone());
    let (status, _) = call(&app, Method::POST, "/ingest", Some(json!({ "pairs": pairs() }))).await;
    assert_eq!(status, StatusCode::OK);
    (engine, app)
}

#[tokio::test]
async fn healthz_reports_ok() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine(dir.path()));
    let (status, body) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "status": "ok" }));
}

#[tokio::test]
async fn ingest_pairs_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine(dir.path()));
    let (status, body) = call(&app, Method::POST, "/ingest", Some(json!({ "pairs": pairs() }))).await;
    assert_eq!(status, StatusCode::OK);

    let mut kbs: mmds_core::KnowledgeBaseSet = KnowledgeBases::new(Taxonomy::default(), Arc::new(ReferenceEmbedder::default()));
    let added = kbs.upsert_all(pairs()).unwrap();
    let expected = IngestSummary { documents: pairs().len(), pairs: added, departments: kbs.sizes(), skipped: vec![] };
    assert_eq!(body, canon(&expected));
    golden("ingest_pairs", &body);
}

#[tokio::test]
async fn ingest_documents_matches_library() {
    let generator: Arc<dyn Backend> = Arc::new(MockBackend::new(
        AdapterScript::new("Q: What relieves angina at rest? A: Sublingual nitroglycerin.\nQ: What is a normal troponin? A: Below the assay reference limit.")
            .with("Empty", "nothing useful here")
            .unwrap(),
    ));
    let classifier: Arc<dyn Backend> = Arc::new(MockBackend::new(AdapterScript::new("cardio")));
    let backends = EngineBackends { generation: generator.clone(), classification: classifier.clone(), ..EngineBackends::uniform(mock()) };
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine_with(config(dir.path()), backends));
    let documents = vec![
        SourceDocument { id: "d1".into(), text: "Angina and troponin notes.".into() },
        SourceDocument { id: "d2".into(), text: "Empty".into() },
    ];
    let (status, body) = call(&app, Method::POST, "/ingest", Some(json!({ "documents": documents }))).await;
    assert_eq!(status, StatusCode::OK);

    let mut kbs: mmds_core::KnowledgeBaseSet = KnowledgeBases::new(Taxonomy::default(), Arc::new(ReferenceEmbedder::default()));
    let expected = ingest::ingest_documents(&documents, &mut kbs, &*generator, &*classifier, &PromptTemplates::default()).unwrap();
    assert_eq!(body, canon(&expected));
    assert_eq!(expected.skipped.len(), 1);
    golden("ingest_documents", &body);
}

#[tokio::test]
async fn retrieve_matches_library_in_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = seeded(dir.path()).await;
    let kbs = library_kbs();
    for (mode, name) in [(RetrievalMode::Routed, "retrieve_routed"), (RetrievalMode::Pooled, "retrieve_pooled")] {
        let (status, body) = call(&app, Method::POST, "/retrieve", Some(json!({ "query": CARDIAC, "mode": mode }))).await;
        assert_eq!(status, StatusCode::OK);
        let config = RetrievalConfig::default().with_mode(mode);
        let expected = retrieval::retrieve(CARDIAC, &kbs, &config, Router::Centroid, Scorer::Reference).unwrap();
        assert_eq!(body, canon(&expected));
        golden(name, &body);
    }
}

#[tokio::test]
async fn video_analysis_matches_library_and_rubric() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine(dir.path()));
    let text = std::fs::read_to_string(fixture("manifest_16_of_30.json")).unwrap();
    let (status, body) = call_raw(&app, Method::POST, "/video/analyze", Some(text.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["gate"], json!(true));

    let input: VideoInput = serde_json::from_str(&text).unwrap();
    let backend = mock();
    let templates = PromptTemplates::default();
    let ctx = VideoContext { backend: &*backend, templates: &templates, history: &[], summarize_with_backend: false, workers: 4 };
    let expected = videoparse::analyze_video(&input, &ctx).unwrap();
    assert_eq!(body, canon(&expected));

    let manifest = ObservationManifest::from_json(&text).unwrap();
    let features = videoparse::aggregate_features(&manifest.frames).unwrap();
    let oracle = videoparse::grade_hb(&features).unwrap();
    assert_eq!(body["grade"], canon(&oracle));
    golden("video_16_of_30", &body);
}

#[tokio::test]
async fn consultation_flow_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, app) = seeded(dir.path()).await;
    let sizes_before = engine.kbs().sizes();

    let (status, created) = call(&app, Method::POST, "/sessions", Some(json!({ "patient_id": "p1" }))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["session_id"].as_str().unwrap().to_owned();
    let mut session = ConsultationSession::new(id.clone(), "p1");
    assert_eq!(created, canon(&session));

    let kbs = library_kbs();
    let ledger = Mutex::new(Ledger::in_memory());
    let log = Mutex::new(ExecutionLog::in_memory());
    let templates = PromptTemplates::default();
    let backend = mock();
    let clock = clock();
    let retrieval_config = RetrievalConfig::default();
    let deps = ConsultDeps {
        kbs: &kbs,
        retrieval: &retrieval_config,
        router: Router::Centroid,
        scorer: Scorer::Reference,
        backend: &*backend,
        templates: &templates,
        ledger: &ledger,
        log: &log,
        clock: &*clock,
        history_budget: agent::DEFAULT_HISTORY_BUDGET,
    };

    let uri = format!("/sessions/{id}/messages");
    for (i, text) in ["chest pain", CARDIAC, CARDIAC_AGAIN].into_iter().enumerate() {
        let (status, body) = call(&app, Method::POST, &uri, Some(json!({ "text": text }))).await;
        assert_eq!(status, StatusCode::OK, "{body}");

        agent::advance(&mut session, AdvanceInput::UserText(text.into()), &*clock).unwrap();
        let decision = agent::assess(&session, AssessPolicy::Rules(RulePolicy::default()), &templates).unwrap();
        let report = if decision.kind == agent::DecisionKind::Sufficient {
            Some(agent::consult(&mut session, &deps).unwrap())
        } else {
            session.record_decision(&decision, &*clock).unwrap();
            None
        };
        let expected = MessageResponse { session_id: id.clone(), state: session.state, decision, report };
        assert_eq!(body, canon(&expected));
        golden(&format!("message_{i}"), &body);
    }

    let (_, body) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(body, canon(&session));

    let (status, body) = call(&app, Method::GET, "/patients/p1/history", None).await;
    assert_eq!(status, StatusCode::OK);
    let history = ledger.lock().unwrap().history_for("p1");
    assert_eq!(history.len(), 2);
    assert_eq!(history[0].history_refs, vec!["R000000".to_string()]);
    assert_eq!(body, canon(&history));
    golden("history_p1", &body);

    let (status, body) = call(&app, Method::GET, "/ledger/verify", None).await;
    assert_eq!(status, StatusCode::OK);
    let l = ledger.lock().unwrap();
    assert_eq!(body, canon(&LedgerStatus { valid: l.verify_chain(), entries: l.len() }));
    assert_eq!(body, json!({ "valid": true, "entries": 2 }));

    assert_eq!(engine.kbs().sizes(), sizes_before, "only /ingest may change knowledge bases");
    let events: Vec<_> = engine.execution_log().events().iter().map(|e| (e.run_id.clone(), e.step)).collect();
    let lib_events: Vec<_> = log.lock().unwrap().events().iter().map(|e| (e.run_id.clone(), e.step)).collect();
    assert_eq!(events, lib_events);
}

#[tokio::test]
async fn one_token_message_asks_the_user() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine(dir.path()));
    let (_, created) = call(&app, Method::POST, "/sessions", Some(json!({ "patient_id": "p9" }))).await;
    let uri = format!("/sessions/{}/messages", created["session_id"].as_str().unwrap());
    let (status, body) = call(&app, Method::POST, &uri, Some(json!({ "text": "headache" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["decision"]["kind"], json!("AskUser"));
    assert!(body.get("report").is_none());
}

#[tokio::test]
async fn eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = seeded(dir.path()).await;
    let items = evalharness::load_medqa(&fixture("toy.jsonl")).unwrap();
    let kbs = library_kbs();
    let templates = PromptTemplates::default();
    let backend = mock();
    for pipeline in Pipeline::ALL {
        let (status, body) =
            call(&app, Method::POST, "/eval/run", Some(json!({ "dataset": fixture("toy.jsonl"), "pipeline": pipeline }))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["status"], json!("completed"));
        let ctx = EvalContext {
            backend: &*backend,
            templates: &templates,
            kbs: Some(&kbs),
            retrieval: RetrievalConfig::default(),
            router: Router::Centroid,
            scorer: Scorer::Reference,
            workers: 4,
        };
        let expected = evalharness::run_mcq_eval(&items, pipeline, &ctx).unwrap();
        assert_eq!(body["result"], canon(&expected));
        assert_eq!(expected.accuracy.percent().as_deref(), Some("25.00"));

        let run_id = body["run_id"].as_str().unwrap();
        let (status, polled) = call(&app, Method::GET, &format!("/eval/runs/{run_id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(polled, body);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn large_eval_runs_in_background() {
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(mmds_service::EngineConfig { eval_async_threshold: 5, ..config(dir.path()) }, EngineBackends::uniform(mock()));
    let app = router(engine);
    let (status, body) =
        call(&app, Method::POST, "/eval/run", Some(json!({ "dataset": fixture("toy.jsonl"), "pipeline": "base" }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let uri = format!("/eval/runs/{}", body["run_id"].as_str().unwrap());
    let mut polled = Value::Null;
    for _ in 0..200 {
        polled = call(&app, Method::GET, &uri, None).await.1;
        if polled["status"] != json!("running") {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(polled["status"], json!("completed"));
    assert_eq!(polled["result"]["accuracy"], json!({ "correct": 5, "total": 20, "percent": "25.00" }));
}

/// Holds every chat call long enough for concurrent requests to collide.
struct SlowBackend(MockBackend, Duration);

impl Backend for SlowBackend {
    fn name(&self) -> &str {
        "slow"
    }
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, AdapterError> {
        std::thread::sleep(self.1);
        self.0.chat(messages)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, AdapterError> {
        self.0.embed(text)
    }
    fn score_pair(&self, q: &str, d: &str) -> Result<f64, AdapterError> {
        self.0.score_pair(q, d)
    }
    fn transcribe(&self, audio: &std::path::Path) -> Result<Transcript, AdapterError> {
        self.0.transcribe(audio)
    }
    fn describe_image(&self, image: &std::path::Path, messages: &[ChatMessage]) -> Result<String, AdapterError> {
        self.0.describe_image(image, messages)
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_to_one_session_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let slow: Arc<dyn Backend> = Arc::new(SlowBackend(MockBackend::new(script()), Duration::from_millis(600)));
    let engine = engine_with(config(dir.path()), EngineBackends { report: slow, ..EngineBackends::uniform(mock()) });
    let app = router(engine);
    call(&app, Method::POST, "/ingest", Some(json!({ "pairs": pairs() }))).await;
    let (_, created) = call(&app, Method::POST, "/sessions", Some(json!({ "patient_id": "p2" }))).await;
    let uri = format!("/sessions/{}/messages", created["session_id"].as_str().unwrap());

    let handles: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            let uri = uri.clone();
            tokio::spawn(async move { call(&app, Method::POST, &uri, Some(json!({ "text": CARDIAC }))).await })
        })
        .collect();
    let mut statuses = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        if status == StatusCode::CONFLICT {
            assert_eq!(body["code"], json!("conflict"));
        }
        statuses.push(status);
    }
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::OK).count(), 1, "{statuses:?}");
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::CONFLICT).count(), 7, "{statuses:?}");
}

struct DownBackend;

impl Backend for DownBackend {
    fn name(&self) -> &str {
        "down"
    }
    fn chat(&self, _: &[ChatMessage]) -> Result<String, AdapterError> {
        Err(AdapterError::BackendUnavailable { attempts: 3, reason: "connection refused".into() })
    }
    fn embed(&self, _: &str) -> Result<Vec<f64>, AdapterError> {
        Err(AdapterError::BackendUnavailable { attempts: 3, reason: "connection refused".into() })
    }
    fn score_pair(&self, _: &str, _: &str) -> Result<f64, AdapterError> {
        Err(AdapterError::BackendUnavailable { attempts: 3, reason: "connection refused".into() })
    }
    fn transcribe(&self, _: &std::path::Path) -> Result<Transcript, AdapterError> {
        Err(AdapterError::BackendUnavailable { attempts: 3, reason: "connection refused".into() })
    }
    fn describe_image(&self, _: &std::path::Path, _: &[ChatMessage]) -> Result<String, AdapterError> {
        Err(AdapterError::BackendUnavailable { attempts: 3, reason: "connection refused".into() })
    }
}

#[tokio::test]
async fn errors_use_the_documented_codes() {
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(config(dir.path()), EngineBackends { report: Arc::new(DownBackend), ..EngineBackends::uniform(mock()) });
    let app = router(engine.clone());

    let (status, body) = call(&app, Method::POST, "/retrieve", Some(json!({ "query": CARDIAC }))).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::BAD_REQUEST, json!("bad_request")), "{body}");

    let (status, body) = call_raw(&app, Method::POST, "/sessions", Some("{not json".into())).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::BAD_REQUEST, json!("bad_request")));
    assert!(!body["message"].as_str().unwrap().is_empty());

    let (status, body) = call(&app, Method::POST, "/sessions/nope/messages", Some(json!({ "text": "hi" }))).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::NOT_FOUND, json!("not_found")));

    let (status, body) = call(&app, Method::GET, "/eval/runs/E999999", None).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::NOT_FOUND, json!("not_found")));

    call(&app, Method::POST, "/ingest", Some(json!({ "pairs": pairs() }))).await;
    let (_, created) = call(&app, Method::POST, "/sessions", Some(json!({ "patient_id": "p3", "session_id": "fixed-1" }))).await;
    assert_eq!(created["session_id"], json!("fixed-1"));
    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({ "patient_id": "p3", "session_id": "fixed-1" }))).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::CONFLICT, json!("conflict")));

    let (status, body) = call(&app, Method::POST, "/sessions/fixed-1/messages", Some(json!({ "text": CARDIAC }))).await;
    assert_eq!((status, body["code"].clone()), (StatusCode::BAD_GATEWAY, json!("backend_unavailable")), "{body}");
    let (_, session) = call(&app, Method::GET, "/sessions/fixed-1", None).await;
    assert_eq!(session["state"], json!("gathering"));

    let (status, _) = call(&app, Method::POST, "/sessions/fixed-1/messages", Some(json!({ "text": "  " }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(engine.verify_ledger().unwrap(), LedgerStatus { valid: true, entries: 0 });
}

#[tokio::test]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let session_id;
    {
        let (_, app) = seeded(dir.path()).await;
        let (_, created) = call(&app, Method::POST, "/sessions", Some(json!({ "patient_id": "p4" }))).await;
        session_id = created["session_id"].as_str().unwrap().to_owned();
        let (status, _) = call(&app, Method::POST, &format!("/sessions/{session_id}/messages"), Some(json!({ "text": CARDIAC }))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let engine = engine(dir.path());
    assert_eq!(engine.kbs().sizes(), library_kbs().sizes());
    assert_eq!(engine.history("p4").len(), 1);
    let session = engine.session(&session_id).unwrap();
    assert_eq!(session.consultations, 1);
    assert!(engine.verify_ledger().unwrap().valid);
    let app = router(engine);
    let (_, created) = call(&app, Method::POST, "/sessions", Some(json!({ "patient_id": "p5" }))).await;
    assert_ne!(created["session_id"].as_str().unwrap(), session_id);
}

#[tokio::test]
async fn tampered_ledger_file_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    {
        let (_, app) = seeded(dir.path()).await;
        let (_, created) = call(&app, Method::POST, "/sessions", Some(json!({ "patient_id": "p6" }))).await;
        let uri = format!("/sessions/{}/messages", created["session_id"].as_str().unwrap());
        call(&app, Method::POST, &uri, Some(json!({ "text": CARDIAC }))).await;
    }
    let path = dir.path().join(mmds_service::engine::LEDGER_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("cardio", "neuro", 1)).unwrap();
    let app = router(engine(dir.path()));
    let (status, body) = call(&app, Method::GET, "/ledger/verify", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "valid": false, "entries": 1 }));
}
