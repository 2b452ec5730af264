//! Loading an ensemble from a run directory and keeping probe sessions on
//! disk.
//!
//! A run directory holds `vocab.txt` and one model per split, either as
//! `split-<i>.ckpt` (written by `curve`) or as a `split-<i>/` plan output
//! directory whose last checkpoint is the final model. An optional
//! `report.json` names the condition and carries the stored evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use domainsim_core::encoder::StageRecord;
use domainsim_core::evaluation::EnsembleReport;
use domainsim_core::probe::{Ensemble, ProbeError, ProbeResult, ProbeSession, SessionStep};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::files::{self, FileError};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum ProbeServiceError {
    #[error("{dir}: expected {expected} split models, found {found}; missing {missing:?}")]
    SplitCount { dir: PathBuf, expected: usize, found: usize, missing: Vec<usize> },
    #[error("{dir}: no vocab.txt")]
    NoVocab { dir: PathBuf },
    #[error("{0}: no checkpoint in split directory")]
    EmptySplit(PathBuf),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("invalid session id {0:?}")]
    BadSessionId(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    File(#[from] FileError),
}

impl ProbeServiceError {
    /// Machine-readable error code for HTTP clients.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown-session",
            Self::BadSessionId(_) => "bad-session-id",
            Self::BadRequest(_) => "bad-request",
            Self::Probe(ProbeError::SessionClosed(_)) => "session-closed",
            Self::Probe(ProbeError::InvalidExpected(_)) => "invalid-expected",
            Self::Probe(ProbeError::Tokenizer(_)) => "invalid-input",
            Self::Probe(_) => "ensemble",
            Self::SplitCount { .. } | Self::NoVocab { .. } | Self::EmptySplit(_) | Self::Checkpoint(_) => "ensemble",
            Self::File(_) => "io",
        }
    }
}

/// An ensemble plus what `GET /api/ensemble` reports about it.
#[derive(Debug, Clone)]
pub struct EnsembleHandle {
    pub ensemble: Ensemble,
    pub run_dir: PathBuf,
    /// Per-model provenance, in split order.
    pub provenance: Vec<Vec<StageRecord>>,
    pub report: Option<EnsembleReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleInfo {
    pub condition: String,
    pub k: usize,
    pub threshold: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub layers: usize,
    pub hidden: usize,
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: usize,
    pub stages: Vec<String>,
    pub test_accuracy: Option<f64>,
}

impl EnsembleHandle {
    pub fn info(&self) -> EnsembleInfo {
        let e = &self.ensemble;
        let accuracy = |i: usize| self.report.as_ref().and_then(|r| r.splits.get(i)).map(|s| s.test_accuracy);
        EnsembleInfo {
            condition: e.condition.clone(),
            k: e.k(),
            threshold: e.threshold,
            max_len: e.max_len,
            vocab_size: e.vocab.size(),
            layers: e.config().layers,
            hidden: e.config().hidden,
            models: self
                .provenance
                .iter()
                .enumerate()
                .map(|(model_id, p)| ModelInfo { model_id, stages: p.iter().map(|r| r.name.clone()).collect(), test_accuracy: accuracy(model_id) })
                .collect(),
        }
    }
}

fn split_index(name: &str) -> Option<usize> {
    name.strip_prefix("split-")?.trim_end_matches(".ckpt").parse().ok()
}

fn last_checkpoint(dir: &Path) -> Result<PathBuf, ProbeServiceError> {
    let mut ckpts: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(files::io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    ckpts.sort();
    ckpts.pop().ok_or_else(|| ProbeServiceError::EmptySplit(dir.to_path_buf()))
}

/// Loads the `k` split models of `run_dir`. Any other count is an error
/// naming the missing splits; `k` other than 5 only logs a warning.
pub fn load_ensemble(run_dir: &Path, k: usize) -> Result<EnsembleHandle, ProbeServiceError> {
    if k != DEFAULT_K {
        warn!("loading an ensemble of {k} models; the consistency rule assumes {DEFAULT_K}");
    }
    let mut found: BTreeMap<usize, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(run_dir).map_err(files::io_err(run_dir))? {
        let entry = entry.map_err(files::io_err(run_dir))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(i) = split_index(&name) else { continue };
        if path.is_dir() {
            found.insert(i, last_checkpoint(&path)?);
        } else if name.ends_with(".ckpt") {
            found.insert(i, path);
        }
    }
    let missing: Vec<usize> = (0..k).filter(|i| !found.contains_key(i)).collect();
    if found.len() != k || !missing.is_empty() {
        return Err(ProbeServiceError::SplitCount { dir: run_dir.to_path_buf(), expected: k, found: found.len(), missing });
    }
    let vocab_path = [run_dir.join("vocab.txt"), run_dir.join("split-0").join("vocab.txt")]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| ProbeServiceError::NoVocab { dir: run_dir.to_path_buf() })?;
    let vocab = files::load_vocab(&vocab_path)?;
    let members = found.values().map(|p| checkpoint::load(p)).collect::<Result<Vec<_>, _>>()?;
    let report_path = run_dir.join("report.json");
    let report: Option<EnsembleReport> = if report_path.exists() { Some(files::read_json(&report_path)?) } else { None };
    let condition = match &report {
        Some(r) => r.condition.clone(),
        None => run_dir.file_name().map_or_else(|| "ensemble".into(), |n| n.to_string_lossy().into_owned()),
    };
    let provenance = members.iter().map(|m| m.provenance.clone()).collect();
    let max_len = members[0].config.max_positions;
    let ensemble = Ensemble::new(condition, members, vocab, max_len)?;
    Ok(EnsembleHandle { ensemble, run_dir: run_dir.to_path_buf(), provenance, report })
}

/// Probe inputs as sent by clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRequest {
    pub q1: String,
    pub q2: String,
    #[serde(default)]
    pub expected: Option<u8>,
    #[serde(default)]
    pub note: Option<String>,
}

pub fn classify(handle: &EnsembleHandle, req: &ProbeRequest) -> Result<ProbeResult, ProbeServiceError> {
    if req.q1.trim().is_empty() || req.q2.trim().is_empty() {
        return Err(ProbeServiceError::BadRequest("q1 and q2 must be non-empty".into()));
    }
    Ok(handle.ensemble.classify(&req.q1, &req.q2, req.expected)?)
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

/// Sessions under one directory: `<id>.jsonl` holds one step per line and
/// `<id>.closed` marks a closed session. Each session has its own lock, so
/// appends to one session are serialized and different sessions proceed
/// independently.
#[derive(Debug)]
pub struct SessionStore {
    dir: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Mutex<ProbeSession>>>>,
    next: Mutex<u64>,
}

impl SessionStore {
    /// Opens `dir`, creating it if needed, and loads every session in it.
    pub fn open(dir: &Path) -> Result<Self, ProbeServiceError> {
        fs::create_dir_all(dir).map_err(files::io_err(dir))?;
        let mut sessions = HashMap::new();
        let mut next = 1;
        for entry in fs::read_dir(dir).map_err(files::io_err(dir))? {
            let path = entry.map_err(files::io_err(dir))?.path();
            if path.extension().is_none_or(|x| x != "jsonl") {
                continue;
            }
            let Some(id) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else { continue };
            let steps: Vec<SessionStep> = files::read_jsonl(&path)?;
            let closed = dir.join(format!("{id}.closed")).exists();
            if let Ok(n) = id.parse::<u64>() {
                next = next.max(n + 1);
            }
            sessions.insert(id.clone(), Arc::new(Mutex::new(ProbeSession::from_steps(id, steps, closed))));
        }
        Ok(Self { dir: dir.to_path_buf(), sessions: Mutex::new(sessions), next: Mutex::new(next) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<ProbeSession>>, ProbeServiceError> {
        if !valid_id(id) {
            return Err(ProbeServiceError::BadSessionId(id.into()));
        }
        self.sessions.lock().expect("session map lock").get(id).cloned().ok_or_else(|| ProbeServiceError::UnknownSession(id.into()))
    }

    /// Starts an empty session with the next free numeric id.
    pub fn create(&self) -> Result<String, ProbeServiceError> {
        let mut next = self.next.lock().expect("id lock");
        let id = format!("{:06}", *next);
        *next += 1;
        let path = self.log_path(&id);
        fs::File::create(&path).map_err(files::io_err(&path))?;
        self.sessions.lock().expect("session map lock").insert(id.clone(), Arc::new(Mutex::new(ProbeSession::new(id.clone()))));
        Ok(id)
    }

    /// Appends a step; the line is on disk before the call returns.
    pub fn append(&self, id: &str, result: ProbeResult, note: Option<String>) -> Result<SessionStep, ProbeServiceError> {
        let session = self.get(id)?;
        let mut s = session.lock().expect("session lock");
        let step = s.append(now_ms(), result, note)?.clone();
        let path = self.log_path(id);
        let write = || -> std::io::Result<()> {
            let mut f = OpenOptions::new().append(true).create(true).open(&path)?;
            let mut line = serde_json::to_vec(&step).map_err(std::io::Error::other)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.sync_data()
        };
        if let Err(source) = write() {
            s.steps.pop();
            return Err(FileError::Io { path, source }.into());
        }
        Ok(step)
    }

    pub fn session(&self, id: &str) -> Result<ProbeSession, ProbeServiceError> {
        Ok(self.get(id)?.lock().expect("session lock").clone())
    }

    /// The raw JSONL log, byte for byte.
    pub fn log(&self, id: &str) -> Result<Vec<u8>, ProbeServiceError> {
        let session = self.get(id)?;
        let _guard = session.lock().expect("session lock");
        let path = self.log_path(id);
        Ok(fs::read(&path).map_err(files::io_err(&path))?)
    }

    pub fn close(&self, id: &str) -> Result<(), ProbeServiceError> {
        let session = self.get(id)?;
        let mut s = session.lock().expect("session lock");
        let marker = self.dir.join(format!("{id}.closed"));
        fs::write(&marker, b"").map_err(files::io_err(&marker))?;
        s.close();
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("session map lock").keys().cloned().collect();
        ids.sort();
        ids
    }
}
