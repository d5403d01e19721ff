use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use mmds_core::agent::{DecisionKind, MedicalReport};
use mmds_core::evalharness::{self, Pipeline};
use mmds_core::retrieval::RetrievalMode;
use mmds_core::videoparse::VideoInput;
use serde::Serialize;

use crate::config::EngineConfig;
use crate::engine::{Engine, IngestRequest, MessageRequest, RetrieveRequest, SessionRequest};
use crate::error::ApiError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mmds", version, about = "Department-routed medical consultation engine")]
pub struct Cli {
    /// Engine configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Overrides `workers`.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or extend the department knowledge bases.
    Ingest {
        /// Raw corpus: directory of .txt files, JSONL of {id, text}, or one text file.
        #[arg(long, conflicts_with = "pairs", required_unless_present = "pairs")]
        corpus: Option<PathBuf>,
        /// JSONL of already labeled pairs.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// One-shot retrieval.
    Query {
        text: String,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<RetrievalMode>,
    },
    /// Interactive consultation on standard input.
    Consult {
        #[arg(long)]
        patient: String,
        /// Resume or name the session.
        #[arg(long)]
        session: Option<String>,
    },
    /// Grade a video from an observation manifest or frame listing.
    Video {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Multiple-choice evaluation.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_pipeline)]
        pipeline: Pipeline,
    },
    /// Report ledger operations.
    Ledger {
        #[command(subcommand)]
        action: LedgerAction,
    },
    /// Run the HTTP API.
    Serve {
        /// Overrides `listen`.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum LedgerAction {
    /// Check the hash chain.
    Verify,
}

fn parse_mode(s: &str) -> Result<RetrievalMode, String> {
    match s {
        "routed" => Ok(RetrievalMode::Routed),
        "pooled" => Ok(RetrievalMode::Pooled),
        _ => Err("expected routed or pooled".into()),
    }
}

fn parse_pipeline(s: &str) -> Result<Pipeline, String> {
    Pipeline::parse(s).ok_or_else(|| "expected base, pooled_rag or routed_rag".into())
}

struct Io<'a> {
    input: &'a mut dyn BufRead,
    out: &'a mut dyn Write,
    json: bool,
}

impl Io<'_> {
    fn emit<T: Serialize>(&mut self, value: &T, text: impl FnOnce() -> String) -> Result<(), ApiError> {
        let line = if self.json { serde_json::to_string(value).map_err(|e| ApiError::internal(e.to_string()))? } else { text() };
        writeln!(self.out, "{line}").map_err(|e| ApiError::internal(e.to_string()))
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let _ = write!(err, "{e}");
            return EXIT_USAGE;
        }
    };
    match execute(cli, input, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<EngineConfig, ApiError> {
    let mut config = match &cli.config {
        Some(path) => EngineConfig::from_file(path)?,
        None => EngineConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok());
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    if let Command::Serve { listen: Some(listen) } = &cli.command {
        config.listen = listen.clone();
    }
    Ok(config)
}

fn execute(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<i32, ApiError> {
    let config = load_config(&cli)?;
    let engine = Arc::new(Engine::start(config)?);
    let mut io = Io { input, out, json: cli.json };
    match cli.command {
        Command::Ingest { corpus, pairs } => {
            let request = match pairs {
                Some(path) => IngestRequest { pairs: Some(read_pairs(&path)?), ..Default::default() },
                None => IngestRequest { corpus, ..Default::default() },
            };
            let summary = engine.ingest(request)?;
            io.emit(&summary, || {
                let sizes: Vec<String> = summary.departments.iter().map(|(d, n)| format!("{d}={n}")).collect();
                format!(
                    "ingested {} pairs from {} documents ({} skipped); {}",
                    summary.pairs,
                    summary.documents,
                    summary.skipped.len(),
                    sizes.join(" ")
                )
            })?;
        }
        Command::Query { text, mode } => {
            let outcome = engine.retrieve(&RetrieveRequest { query: text, mode })?;
            io.emit(&outcome, || {
                let mut lines = vec![format!("department: {}", outcome.department.as_deref().unwrap_or("(pooled)"))];
                if let Some(message) = &outcome.message {
                    lines.push(message.clone());
                }
                for c in &outcome.cases {
                    let score = c.rank_score.unwrap_or(c.recall_score);
                    lines.push(format!("{:.4} [{}] {} {}", score, c.pair_id, c.department, c.question));
                }
                lines.join("\n")
            })?;
        }
        Command::Consult { patient, session } => consult_loop(&engine, patient, session, &mut io)?,
        Command::Video { manifest } => {
            let text = std::fs::read_to_string(&manifest).map_err(|e| ApiError::not_found(format!("{}: {e}", manifest.display())))?;
            let input: VideoInput = serde_json::from_str(&text).map_err(|e| ApiError::bad_request(format!("manifest: {e}")))?;
            let analysis = engine.analyze_video(&input, None)?;
            io.emit(&analysis, || {
                let mut lines = vec![format!("gate: {}", analysis.gate)];
                if let Some(g) = &analysis.grade {
                    lines.push(format!("grade: {}", g.grade));
                    lines.push(format!("rationale: {}", g.rationale));
                }
                lines.extend(analysis.warnings.iter().map(|w| format!("warning: {w}")));
                lines.join("\n")
            })?;
        }
        Command::Eval { dataset, pipeline } => {
            let items = evalharness::load_medqa(&dataset)?;
            let result = engine.evaluate(&items, pipeline)?;
            io.emit(&result, || {
                let a = result.accuracy;
                let percent = a.percent().unwrap_or_else(|| "n/a".into());
                format!("{}: {}/{} correct ({percent}%)", pipeline_name(pipeline), a.correct, a.total)
            })?;
        }
        Command::Ledger { action: LedgerAction::Verify } => {
            let status = engine.verify_ledger()?;
            io.emit(&status, || status.valid.to_string())?;
            if !status.valid {
                return Ok(EXIT_FAILURE);
            }
        }
        Command::Serve { .. } => {
            let runtime = tokio::runtime::Runtime::new().map_err(|e| ApiError::internal(e.to_string()))?;
            runtime.block_on(crate::http::serve(engine)).map_err(|e| ApiError::internal(format!("serve: {e}")))?;
        }
    }
    Ok(EXIT_OK)
}

fn pipeline_name(p: Pipeline) -> &'static str {
    match p {
        Pipeline::Base => "base",
        Pipeline::PooledRag => "pooled_rag",
        Pipeline::RoutedRag => "routed_rag",
    }
}

fn read_pairs(path: &std::path::Path) -> Result<Vec<mmds_core::ingest::QAPair>, ApiError> {
    let text = std::fs::read_to_string(path).map_err(|e| ApiError::not_found(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ApiError::bad_request(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn render_report(r: &MedicalReport) -> String {
    let mut lines = vec![
        format!("report {} ({})", r.report_id, r.department.as_deref().unwrap_or("general")),
        format!("summary: {}", r.summary),
        format!("findings: {}", r.findings),
        format!("recommendations: {}", r.recommendations),
    ];
    if !r.cited_cases.is_empty() {
        lines.push(format!("cited: {}", r.cited_cases.join(", ")));
    }
    if !r.history_refs.is_empty() {
        lines.push(format!("history: {}", r.history_refs.join(", ")));
    }
    lines.join("\n")
}

/// One message per input line until end of input or `/quit`.
fn consult_loop(engine: &Engine, patient: String, session: Option<String>, io: &mut Io<'_>) -> Result<(), ApiError> {
    let session_id = match session {
        Some(id) if engine.session(&id).is_ok() => id,
        requested => engine.create_session(SessionRequest { patient_id: patient, session_id: requested })?.session_id,
    };
    if !io.json {
        let _ = writeln!(io.out, "session {session_id}; describe the complaint, /quit to stop");
    }
    let mut line = String::new();
    loop {
        line.clear();
        let read = io.input.read_line(&mut line).map_err(|e| ApiError::internal(e.to_string()))?;
        let text = line.trim();
        if read == 0 || text == "/quit" {
            return Ok(());
        }
        if text.is_empty() {
            continue;
        }
        let response = engine.post_message(&session_id, MessageRequest { text: text.to_owned() })?;
        io.emit(&response, || match (&response.report, response.decision.kind) {
            (Some(report), _) => render_report(report),
            (None, DecisionKind::AskUser) => format!("agent: {}", response.decision.question_or_directive),
            (None, _) => format!("directive: {}", response.decision.question_or_directive),
        })?;
    }
}
