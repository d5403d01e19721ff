//! Hash-chained, append-only store of sealed reports and the execution log.
//!
//! Each ledger line is the canonical JSON of a [`LedgerEntry`] (fixed field
//! order, UTF-8, no insignificant whitespace). Entry `n` carries the SHA-256
//! of line `n-1` (all zeros for the genesis entry) and the SHA-256 of the
//! canonical JSON of its report.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::MedicalReport;

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("serialization failure: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub seq: u64,
    pub prev_hash: String,
    pub payload_hash: String,
    pub sealed_at: DateTime<Utc>,
    pub payload: MedicalReport,
}

/// Lowercase hex SHA-256.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn canonical_report(report: &MedicalReport) -> Result<String, LedgerError> {
    Ok(serde_json::to_string(report)?)
}

pub fn canonical_entry(entry: &LedgerEntry) -> Result<String, LedgerError> {
    Ok(serde_json::to_string(entry)?)
}

/// Chain check over raw stored lines. Any line that does not parse, is not in
/// canonical form, or breaks the sequence, link or payload digest fails the
/// whole chain.
pub fn verify_lines<L: AsRef<[u8]>>(lines: &[L]) -> bool {
    let mut expected_prev = GENESIS_HASH.to_owned();
    for (i, raw) in lines.iter().enumerate() {
        let raw = raw.as_ref();
        let Ok(entry) = serde_json::from_slice::<LedgerEntry>(raw) else {
            return false;
        };
        if entry.seq != i as u64 || entry.prev_hash != expected_prev {
            return false;
        }
        match canonical_report(&entry.payload) {
            Ok(payload) if digest_hex(payload.as_bytes()) == entry.payload_hash => {}
            _ => return false,
        }
        match canonical_entry(&entry) {
            Ok(canonical) if canonical.as_bytes() == raw => {}
            _ => return false,
        }
        expected_prev = digest_hex(raw);
    }
    true
}

/// Single-writer ledger, optionally backed by a JSONL file.
#[derive(Debug, Default)]
pub struct Ledger {
    path: Option<PathBuf>,
    lines: Vec<String>,
    entries: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a ledger file. Lines that fail to parse are kept
    /// verbatim so that [`Ledger::verify_chain`] reports them.
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut ledger = Self { path: Some(path.to_owned()), ..Self::default() };
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                if let Ok(entry) = serde_json::from_str::<LedgerEntry>(&line) {
                    ledger.entries.push(entry);
                }
                ledger.lines.push(line);
            }
        }
        Ok(ledger)
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn append_report(&mut self, report: MedicalReport, sealed_at: DateTime<Utc>) -> Result<LedgerEntry, LedgerError> {
        let prev_hash = self.lines.last().map(|l| digest_hex(l.as_bytes())).unwrap_or_else(|| GENESIS_HASH.to_owned());
        let payload_hash = digest_hex(canonical_report(&report)?.as_bytes());
        let entry = LedgerEntry { seq: self.lines.len() as u64, prev_hash, payload_hash, sealed_at, payload: report };
        let line = canonical_entry(&entry)?;
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{line}")?;
            file.sync_data()?;
        }
        self.lines.push(line);
        self.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn verify_chain(&self) -> bool {
        verify_lines(&self.lines)
    }

    /// Sealed reports of one patient, newest first.
    pub fn history_for(&self, patient_id: &str) -> Vec<MedicalReport> {
        self.entries.iter().rev().filter(|e| e.payload.patient_id == patient_id).map(|e| e.payload.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Route,
    Retrieve,
    HistoryLoad,
    Compose,
    Gate,
    Grade,
    Ingest,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub run_id: String,
    pub step: Step,
    pub detail: String,
    pub at: DateTime<Utc>,
}

/// Append-only execution log; events of one run come back in append order.
#[derive(Debug, Default)]
pub struct ExecutionLog {
    path: Option<PathBuf>,
    events: Vec<LogEvent>,
}

impl ExecutionLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut log = Self { path: Some(path.to_owned()), events: Vec::new() };
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    log.events.push(serde_json::from_str(&line)?);
                }
            }
        }
        Ok(log)
    }

    pub fn log_event(&mut self, event: LogEvent) -> Result<(), LedgerError> {
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{}", serde_json::to_string(&event)?)?;
            file.flush()?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn events_for(&self, run_id: &str) -> Vec<&LogEvent> {
        self.events.iter().filter(|e| e.run_id == run_id).collect()
    }
}

/// `key=value` fields of an event detail, split on `; `.
pub fn detail_field<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail.split("; ").find_map(|part| part.strip_prefix(key)?.strip_prefix('='))
}

/// What a consultation run decided, reconstructed from its log events.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunReplay {
    pub department: Option<String>,
    pub case_ids: Vec<String>,
    pub report_id: Option<String>,
}

pub fn replay_run(events: &[&LogEvent]) -> RunReplay {
    let mut replay = RunReplay::default();
    for event in events {
        match event.step {
            Step::Route => replay.department = detail_field(&event.detail, "department").map(str::to_owned),
            Step::Retrieve => {
                replay.case_ids = detail_field(&event.detail, "cases")
                    .map(|s| s.split(',').filter(|x| !x.is_empty()).map(str::to_owned).collect())
                    .unwrap_or_default();
            }
            Step::Compose => replay.report_id = detail_field(&event.detail, "report").map(str::to_owned),
            _ => {}
        }
    }
    replay
}
