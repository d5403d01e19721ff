//! Consultation sessions and the medical agent loop: assess the evidence,
//! ask for more or request image analysis, then route, retrieve, load the
//! patient's sealed history and compose a report that is sealed into the
//! ledger.

use std::sync::{Mutex, MutexGuard, OnceLock};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{self, AdapterError, Backend};
use crate::clock::Clock;
use crate::ingest::KnowledgeBases;
use crate::ledger::{ExecutionLog, Ledger, LedgerError, LogEvent, Step};
use crate::retrieval::{self, route, Candidate, RetrievalConfig, RetrievalError, RetrievalMode, Router, Scorer, FALLBACK_MESSAGE};
use crate::scalar::Scalar;
use crate::templates::{CallSite, PromptTemplates};
use crate::text;
use crate::videoparse::{HBGrade, VideoAnalysis};

pub const DEFAULT_MIN_TOKENS: usize = 12;
pub const DEFAULT_HISTORY_BUDGET: usize = 3;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("session is closed")]
    SessionClosed,
    #[error("session is {found:?}, expected {expected:?}")]
    InvalidState { expected: SessionState, found: SessionState },
    #[error("message text is empty")]
    EmptyMessage,
    #[error(transparent)]
    Backend(#[from] AdapterError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Agent => "agent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Gathering,
    Retrieving,
    Reporting,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Medium {
    Video,
    Image,
}

impl Medium {
    fn of_keyword(word: &str) -> Self {
        if word.to_ascii_lowercase().starts_with("video") {
            Medium::Video
        } else {
            Medium::Image
        }
    }
}

/// Reference to an analysis produced outside the agent (video parser or an
/// image model).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisAttachment {
    pub analysis_id: String,
    pub medium: Medium,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<HBGrade>,
}

impl AnalysisAttachment {
    pub fn from_video(analysis: &VideoAnalysis) -> Self {
        Self {
            analysis_id: analysis.script.video_id.clone(),
            medium: Medium::Video,
            summary: analysis.script.summary.clone(),
            grade: analysis.grade.clone(),
        }
    }

    fn prompt_line(&self) -> String {
        let medium = match self.medium {
            Medium::Video => "video",
            Medium::Image => "image",
        };
        match &self.grade {
            Some(g) => format!("- {medium} {}: {} (House-Brackmann grade {})", self.analysis_id, self.summary, g.grade),
            None => format!("- {medium} {}: {}", self.analysis_id, self.summary),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsultationSession {
    pub session_id: String,
    pub patient_id: String,
    pub turns: Vec<Turn>,
    pub attachments: Vec<AnalysisAttachment>,
    pub state: SessionState,
    /// Case ids returned by the most recent retrieval step.
    #[serde(default)]
    pub last_retrieval: Option<Vec<String>>,
    #[serde(default)]
    pub consultations: u32,
}

impl ConsultationSession {
    pub fn new(session_id: impl Into<String>, patient_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            patient_id: patient_id.into(),
            turns: Vec::new(),
            attachments: Vec::new(),
            state: SessionState::Gathering,
            last_retrieval: None,
            consultations: 0,
        }
    }

    /// All user turns joined by single spaces.
    pub fn user_text(&self) -> String {
        self.turns.iter().filter(|t| t.speaker == Speaker::User).map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn close(&mut self) {
        self.state = SessionState::Closed;
    }

    fn ensure_open(&self) -> Result<(), AgentError> {
        if self.state == SessionState::Closed {
            Err(AgentError::SessionClosed)
        } else {
            Ok(())
        }
    }

    fn ensure_gathering(&self) -> Result<(), AgentError> {
        self.ensure_open()?;
        if self.state != SessionState::Gathering {
            return Err(AgentError::InvalidState { expected: SessionState::Gathering, found: self.state });
        }
        Ok(())
    }

    fn push_turn(&mut self, speaker: Speaker, text: String, clock: &dyn Clock) {
        let now = clock.now();
        let timestamp = self.turns.last().map_or(now, |t| t.timestamp.max(now));
        self.turns.push(Turn { speaker, text, timestamp });
    }

    /// Records the agent's follow-up question or directive as a turn.
    pub fn record_decision(&mut self, decision: &AgentDecision, clock: &dyn Clock) -> Result<(), AgentError> {
        self.ensure_open()?;
        if decision.kind != DecisionKind::Sufficient {
            self.push_turn(Speaker::Agent, decision.question_or_directive.clone(), clock);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdvanceInput {
    UserText(String),
    Attachment(AnalysisAttachment),
}

/// Appends a user turn or an attachment and re-enters the gathering state.
pub fn advance(session: &mut ConsultationSession, input: AdvanceInput, clock: &dyn Clock) -> Result<(), AgentError> {
    session.ensure_open()?;
    match input {
        AdvanceInput::UserText(text) => {
            if text.trim().is_empty() {
                return Err(AgentError::EmptyMessage);
            }
            session.push_turn(Speaker::User, text, clock);
        }
        AdvanceInput::Attachment(attachment) => session.attachments.push(attachment),
    }
    session.state = SessionState::Gathering;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    Sufficient,
    AskUser,
    RequestImageAnalysis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDecision {
    pub kind: DecisionKind,
    /// Empty exactly when the decision is `Sufficient`.
    pub question_or_directive: String,
}

impl AgentDecision {
    pub fn sufficient() -> Self {
        Self { kind: DecisionKind::Sufficient, question_or_directive: String::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RulePolicy {
    pub min_tokens: usize,
}

impl Default for RulePolicy {
    fn default() -> Self {
        Self { min_tokens: DEFAULT_MIN_TOKENS }
    }
}

#[derive(Clone, Copy)]
pub enum AssessPolicy<'a> {
    Rules(RulePolicy),
    /// Ask the backend; fall back to the rules when its reply has no
    /// recognizable decision tag.
    Adapter { backend: &'a dyn Backend, rules: RulePolicy },
}

fn media_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(videos?|images?|photos?|scans?|x-rays?)\b").expect("static regex"))
}

/// Media the user mentions that have no attached analysis, in order of
/// first mention.
pub fn missing_media(session: &ConsultationSession) -> Vec<Medium> {
    let mut missing = Vec::new();
    for m in media_re().find_iter(&session.user_text()) {
        let medium = Medium::of_keyword(m.as_str());
        if !missing.contains(&medium) && !session.attachments.iter().any(|a| a.medium == medium) {
            missing.push(medium);
        }
    }
    missing
}

fn rule_decision(session: &ConsultationSession, rules: RulePolicy, templates: &PromptTemplates) -> AgentDecision {
    let missing = missing_media(session);
    if !missing.is_empty() {
        let names: Vec<&str> = missing.iter().map(|m| if *m == Medium::Video { "video" } else { "image" }).collect();
        return AgentDecision {
            kind: DecisionKind::RequestImageAnalysis,
            question_or_directive: format!(
                "Analyze the patient's uploaded {} and attach the result before consultation.",
                names.join(" and ")
            ),
        };
    }
    if text::token_count(&session.user_text()) < rules.min_tokens {
        return AgentDecision { kind: DecisionKind::AskUser, question_or_directive: templates.render(CallSite::FollowUp, &[]) };
    }
    AgentDecision::sufficient()
}

fn decision_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^\s*DECISION\s*:\s*(SUFFICIENT|ASK_USER|REQUEST_IMAGE_ANALYSIS)\b\s*:?\s*(.*)$").expect("static regex")
    })
}

/// Reads a `DECISION:` tag. Non-sufficient decisions need their text.
pub fn parse_decision(reply: &str) -> Option<AgentDecision> {
    let caps = decision_re().captures(reply)?;
    let detail = caps[2].trim().to_owned();
    let kind = match caps[1].to_ascii_uppercase().as_str() {
        "SUFFICIENT" => return Some(AgentDecision::sufficient()),
        "ASK_USER" => DecisionKind::AskUser,
        _ => DecisionKind::RequestImageAnalysis,
    };
    (!detail.is_empty()).then_some(AgentDecision { kind, question_or_directive: detail })
}

fn attachments_text(session: &ConsultationSession) -> String {
    if session.attachments.is_empty() {
        return "(none)".into();
    }
    session.attachments.iter().map(AnalysisAttachment::prompt_line).collect::<Vec<_>>().join("\n")
}

pub fn assess(session: &ConsultationSession, policy: AssessPolicy<'_>, templates: &PromptTemplates) -> Result<AgentDecision, AgentError> {
    session.ensure_gathering()?;
    match policy {
        AssessPolicy::Rules(rules) => Ok(rule_decision(session, rules, templates)),
        AssessPolicy::Adapter { backend, rules } => {
            let user_text = session.user_text();
            let attachments = attachments_text(session);
            let prompt = adapters::templated_prompt(
                templates,
                CallSite::Assess,
                &[("user_text", user_text.as_str()), ("attachments", attachments.as_str())],
            );
            let reply = adapters::chat_complete(&prompt, backend)?;
            Ok(parse_decision(&reply).unwrap_or_else(|| rule_decision(session, rules, templates)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalReport {
    pub report_id: String,
    pub session_id: String,
    pub patient_id: String,
    /// Routed department; absent for pooled retrieval.
    pub department: Option<String>,
    pub summary: String,
    pub findings: String,
    pub recommendations: String,
    pub cited_cases: Vec<String>,
    pub history_refs: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReportSections {
    pub summary: Option<String>,
    pub findings: Option<String>,
    pub recommendations: Option<String>,
}

fn section_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s#*]*(SUMMARY|FINDINGS|RECOMMENDATIONS)[\s*]*:\**").expect("static regex"))
}

/// Splits a `SUMMARY: / FINDINGS: / RECOMMENDATIONS:` reply. Repeated
/// headers keep the first occurrence.
pub fn parse_sections(reply: &str) -> ReportSections {
    let marks: Vec<(usize, usize, String)> = section_re()
        .captures_iter(reply)
        .map(|c| {
            let whole = c.get(0).expect("match");
            (whole.start(), whole.end(), c[1].to_ascii_uppercase())
        })
        .collect();
    let mut out = ReportSections::default();
    for (i, (_, body_start, name)) in marks.iter().enumerate() {
        let end = marks.get(i + 1).map_or(reply.len(), |m| m.0);
        let body = reply[*body_start..end].trim().to_owned();
        let slot = match name.as_str() {
            "SUMMARY" => &mut out.summary,
            "FINDINGS" => &mut out.findings,
            _ => &mut out.recommendations,
        };
        if slot.is_none() {
            *slot = Some(body);
        }
    }
    out
}

/// Shared services a consultation needs.
pub struct ConsultDeps<'a, T: Scalar> {
    pub kbs: &'a KnowledgeBases<T>,
    pub retrieval: &'a RetrievalConfig,
    pub router: Router<'a>,
    pub scorer: Scorer<'a>,
    pub backend: &'a dyn Backend,
    pub templates: &'a PromptTemplates,
    pub ledger: &'a Mutex<Ledger>,
    pub log: &'a Mutex<ExecutionLog>,
    pub clock: &'a dyn Clock,
    pub history_budget: usize,
}

fn lock<X>(m: &Mutex<X>) -> MutexGuard<'_, X> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn cases_text<T: Scalar>(cases: &[Candidate<T>]) -> String {
    if cases.is_empty() {
        return "(none)".into();
    }
    cases.iter().map(|c| format!("[{}] Q: {} A: {}", c.pair_id, c.question, c.answer)).collect::<Vec<_>>().join("\n")
}

fn history_text(history: &[MedicalReport]) -> String {
    if history.is_empty() {
        return "(none)".into();
    }
    history
        .iter()
        .map(|r| format!("[{}] {} {}: {}", r.report_id, r.created_at.format("%Y-%m-%d"), r.department.as_deref().unwrap_or("general"), r.summary))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Run identifier for the next consultation of `session`.
pub fn next_run_id(session: &ConsultationSession) -> String {
    format!("{}-c{}", session.session_id, session.consultations + 1)
}

/// Route, retrieve, load history, compose and seal. Each step is logged
/// under [`next_run_id`]. On failure the session returns to gathering.
pub fn consult<T: Scalar>(session: &mut ConsultationSession, deps: &ConsultDeps<'_, T>) -> Result<MedicalReport, AgentError> {
    session.ensure_gathering()?;
    session.state = SessionState::Retrieving;
    let result = run_consultation(session, deps);
    session.state = if result.is_ok() { SessionState::Reporting } else { SessionState::Gathering };
    if result.is_ok() {
        session.consultations += 1;
    }
    result
}

fn run_consultation<T: Scalar>(session: &mut ConsultationSession, deps: &ConsultDeps<'_, T>) -> Result<MedicalReport, AgentError> {
    let run_id = next_run_id(session);
    let log = |step: Step, detail: String| -> Result<(), AgentError> {
        let event = LogEvent { run_id: run_id.clone(), step, detail, at: deps.clock.now() };
        lock(deps.log).log_event(event).map_err(AgentError::from)
    };
    let query = session.user_text();

    let department = match deps.retrieval.mode {
        RetrievalMode::Routed => Some(route::route(&query, deps.kbs, deps.router)?),
        RetrievalMode::Pooled => None,
    };
    let mode = if department.is_some() { "routed" } else { "pooled" };
    log(Step::Route, format!("mode={mode}; department={}", department.as_deref().unwrap_or("")))?;

    let outcome = match &department {
        Some(d) => retrieval::retrieve_in_department(&query, d, deps.kbs, deps.retrieval, deps.scorer)?,
        None => retrieval::retrieve_pooled(&query, deps.kbs, deps.retrieval, deps.scorer)?,
    };
    let case_ids = outcome.case_ids();
    session.last_retrieval = Some(case_ids.clone());
    log(Step::Retrieve, format!("cases={}; fallback={}", case_ids.join(","), outcome.is_no_answer()))?;

    let history: Vec<MedicalReport> =
        lock(deps.ledger).history_for(&session.patient_id).into_iter().take(deps.history_budget).collect();
    let history_refs: Vec<String> = history.iter().map(|r| r.report_id.clone()).collect();
    log(Step::HistoryLoad, format!("reports={}", history_refs.join(",")))?;

    let department_name = department
        .as_deref()
        .map(|d| deps.kbs.taxonomy().get(d).map_or(d.to_owned(), |x| x.display_name.clone()))
        .unwrap_or_else(|| "general medicine".into());
    let cases = cases_text(&outcome.cases);
    let history_block = history_text(&history);
    let attachments = attachments_text(session);
    let prompt = adapters::templated_prompt(
        deps.templates,
        CallSite::Report,
        &[
            ("department", department_name.as_str()),
            ("query", query.as_str()),
            ("attachments", attachments.as_str()),
            ("cases", cases.as_str()),
            ("history", history_block.as_str()),
        ],
    );
    let reply = adapters::chat_complete(&prompt, deps.backend)?;
    let sections = parse_sections(&reply);
    let complete = sections.summary.is_some() && sections.findings.is_some() && sections.recommendations.is_some();
    let findings = if outcome.is_no_answer() {
        FALLBACK_MESSAGE.to_owned()
    } else if complete {
        sections.findings.clone().unwrap_or_default()
    } else {
        reply.trim().to_owned()
    };

    let report = {
        let mut ledger = lock(deps.ledger);
        let report = MedicalReport {
            report_id: format!("R{:06}", ledger.len()),
            session_id: session.session_id.clone(),
            patient_id: session.patient_id.clone(),
            department: department.clone(),
            summary: sections.summary.unwrap_or_default(),
            findings,
            recommendations: sections.recommendations.unwrap_or_default(),
            cited_cases: case_ids,
            history_refs,
            created_at: deps.clock.now(),
        };
        ledger.append_report(report.clone(), deps.clock.now())?;
        report
    };
    log(Step::Compose, format!("report={}; department={}", report.report_id, report.department.as_deref().unwrap_or("")))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SteppingClock;
    use chrono::{Duration, TimeZone};

    fn clock() -> SteppingClock {
        SteppingClock::new(Utc.with_ymd_and_hms(2026, 3, 1, 8, 0, 0).unwrap(), Duration::seconds(1))
    }

    fn session_with(text: &str) -> ConsultationSession {
        let mut s = ConsultationSession::new("s1", "p1");
        advance(&mut s, AdvanceInput::UserText(text.into()), &clock()).unwrap();
        s
    }

    fn rules() -> AssessPolicy<'static> {
        AssessPolicy::Rules(RulePolicy::default())
    }

    #[test]
    fn short_text_asks_user() {
        let templates = PromptTemplates::default();
        let d = assess(&session_with("help"), rules(), &templates).unwrap();
        assert_eq!(d.kind, DecisionKind::AskUser);
        assert_eq!(d.question_or_directive, templates.render(CallSite::FollowUp, &[]));
    }

    #[test]
    fn long_text_is_sufficient() {
        let text = "for three days I have had a drooping mouth on the left side and I cannot close my left eye fully when I blink or sleep at night";
        assert!(text::token_count(text) >= 12);
        let d = assess(&session_with(text), rules(), &PromptTemplates::default()).unwrap();
        assert_eq!(d, AgentDecision::sufficient());
    }

    #[test]
    fn media_mention_requests_analysis() {
        let d = assess(&session_with("see my video"), rules(), &PromptTemplates::default()).unwrap();
        assert_eq!(d.kind, DecisionKind::RequestImageAnalysis);
        assert!(!d.question_or_directive.is_empty());
        let mut s = session_with("see my X-ray please");
        assert_eq!(missing_media(&s), vec![Medium::Image]);
        let att = AnalysisAttachment { analysis_id: "a".into(), medium: Medium::Image, summary: "clear".into(), grade: None };
        advance(&mut s, AdvanceInput::Attachment(att), &clock()).unwrap();
        assert!(missing_media(&s).is_empty());
        assert!(missing_media(&session_with("videography and scanning")).is_empty());
    }

    #[test]
    fn closed_session_guards() {
        let mut s = session_with("help");
        s.close();
        assert!(matches!(advance(&mut s, AdvanceInput::UserText("x".into()), &clock()), Err(AgentError::SessionClosed)));
        assert!(matches!(assess(&s, rules(), &PromptTemplates::default()), Err(AgentError::SessionClosed)));
    }

    #[test]
    fn advance_appends_and_orders_timestamps() {
        let c = clock();
        let mut s = ConsultationSession::new("s", "p");
        advance(&mut s, AdvanceInput::UserText("one".into()), &c).unwrap();
        advance(&mut s, AdvanceInput::UserText("two".into()), &c).unwrap();
        assert_eq!(s.turns.len(), 2);
        assert!(s.turns[0].timestamp <= s.turns[1].timestamp);
        assert!(matches!(advance(&mut s, AdvanceInput::UserText("  ".into()), &c), Err(AgentError::EmptyMessage)));
        s.state = SessionState::Reporting;
        advance(&mut s, AdvanceInput::UserText("three".into()), &c).unwrap();
        assert_eq!(s.state, SessionState::Gathering);
    }

    #[test]
    fn decision_tags() {
        assert_eq!(parse_decision("DECISION: SUFFICIENT"), Some(AgentDecision::sufficient()));
        let d = parse_decision("thinking...\nDECISION: ASK_USER: Where does it hurt?").unwrap();
        assert_eq!(d.kind, DecisionKind::AskUser);
        assert_eq!(d.question_or_directive, "Where does it hurt?");
        assert!(parse_decision("DECISION: ASK_USER").is_none());
        assert!(parse_decision("no idea").is_none());
    }

    #[test]
    fn adapter_policy_falls_back() {
        use crate::adapters::{AdapterScript, MockBackend};
        let templates = PromptTemplates::default();
        let vague = MockBackend::new(AdapterScript::new("I am not sure"));
        let policy = AssessPolicy::Adapter { backend: &vague, rules: RulePolicy::default() };
        assert_eq!(assess(&session_with("help"), policy, &templates).unwrap().kind, DecisionKind::AskUser);
        let tagged = MockBackend::new(AdapterScript::new("DECISION: SUFFICIENT"));
        let policy = AssessPolicy::Adapter { backend: &tagged, rules: RulePolicy::default() };
        assert_eq!(assess(&session_with("help"), policy, &templates).unwrap().kind, DecisionKind::Sufficient);
    }

    #[test]
    fn section_parsing() {
        let s = parse_sections("SUMMARY: a\nmore\nFINDINGS: b\nRECOMMENDATIONS: c");
        assert_eq!(s.summary.as_deref(), Some("a\nmore"));
        assert_eq!(s.findings.as_deref(), Some("b"));
        assert_eq!(s.recommendations.as_deref(), Some("c"));
        let partial = parse_sections("**Summary:** x");
        assert_eq!(partial.summary.as_deref(), Some("x"));
        assert!(partial.findings.is_none());
    }
}
