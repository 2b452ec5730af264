//! Ensemble classification of ad-hoc question pairs and append-only probe
//! sessions.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{argmax_label, pair_logits, positive_probability, Checkpoint, EncoderConfig, EncoderError};
use crate::tokenizer::{encode_pair, TokenizerError, Vocabulary};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("member {index} was trained with a different vocabulary")]
    VocabMismatch { index: usize },
    #[error("member {index} has a different encoder config")]
    ConfigMismatch { index: usize },
    #[error("expected label must be 0 or 1, got {0}")]
    InvalidExpected(u8),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Smallest vote count that makes a pair consistent: 4 of 5, and
/// `ceil(4k / 5)` for other ensemble sizes.
pub fn default_threshold(k: usize) -> usize {
    (4 * k).div_ceil(5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeStatus {
    ConsistentCorrectCandidate,
    ConsistentErrorCandidate,
    Mixed,
}

/// Status of one pair from its votes and the analyst's expected label.
pub fn probe_status(labels: &[u8], expected: u8, threshold: usize) -> ProbeStatus {
    let right = labels.iter().filter(|&&l| l == expected).count();
    if labels.len() - right >= threshold {
        ProbeStatus::ConsistentErrorCandidate
    } else if right >= threshold {
        ProbeStatus::ConsistentCorrectCandidate
    } else {
        ProbeStatus::Mixed
    }
}

/// Majority label and whether the vote was tied (tie goes to 0).
pub fn majority(labels: &[u8]) -> (u8, bool) {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    (u8::from(ones > zeros), ones == zeros)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVerdict {
    pub model_id: usize,
    pub label: u8,
    /// Probability of label 1.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub q1: String,
    pub q2: String,
    pub expected: Option<u8>,
    pub verdicts: Vec<ModelVerdict>,
    pub majority: u8,
    pub majority_tie: bool,
    /// Present when an expected label was given.
    pub status: Option<ProbeStatus>,
    pub threshold: usize,
}

/// The k split models of one condition sharing one vocabulary and config.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub condition: String,
    pub members: Vec<Checkpoint>,
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub threshold: usize,
}

impl Ensemble {
    pub fn new(condition: impl Into<String>, members: Vec<Checkpoint>, vocab: Vocabulary, max_len: usize) -> Result<Self, ProbeError> {
        let first = members.first().ok_or(ProbeError::EmptyEnsemble)?;
        let fp = vocab.fingerprint();
        for (index, m) in members.iter().enumerate() {
            if m.vocab_fingerprint != fp {
                return Err(ProbeError::VocabMismatch { index });
            }
            if m.config != first.config {
                return Err(ProbeError::ConfigMismatch { index });
            }
        }
        let threshold = default_threshold(members.len());
        Ok(Self { condition: condition.into(), members, vocab, max_len, threshold })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.members[0].config
    }

    /// Inference-mode verdicts of every member.
    pub fn classify(&self, q1: &str, q2: &str, expected: Option<u8>) -> Result<ProbeResult, ProbeError> {
        if let Some(e) = expected.filter(|&e| e > 1) {
            return Err(ProbeError::InvalidExpected(e));
        }
        let pair = encode_pair(&self.vocab, q1, q2, self.max_len, None)?;
        let mut verdicts = Vec::with_capacity(self.k());
        for (model_id, m) in self.members.iter().enumerate() {
            let logits = pair_logits(&m.config, &m.weights, core::slice::from_ref(&pair), 1)?[0];
            verdicts.push(ModelVerdict { model_id, label: argmax_label(logits), probability: positive_probability(logits) });
        }
        let labels: Vec<u8> = verdicts.iter().map(|v| v.label).collect();
        let (majority, majority_tie) = majority(&labels);
        Ok(ProbeResult {
            q1: q1.into(),
            q2: q2.into(),
            expected,
            status: expected.map(|e| probe_status(&labels, e, self.threshold)),
            verdicts,
            majority,
            majority_tie,
            threshold: self.threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStep {
    pub step: usize,
    /// Milliseconds since the Unix epoch; strictly increasing within a session.
    pub timestamp_ms: u64,
    pub q1: String,
    pub q2: String,
    pub expected: Option<u8>,
    #[serde(default)]
    pub note: Option<String>,
    pub result: ProbeResult,
}

/// Append-only record of successive edits to a question pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSession {
    pub id: String,
    pub closed: bool,
    pub steps: Vec<SessionStep>,
}

impl ProbeSession {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), closed: false, steps: Vec::new() }
    }

    /// Rebuilds a session from persisted steps.
    pub fn from_steps(id: impl Into<String>, steps: Vec<SessionStep>, closed: bool) -> Self {
        Self { id: id.into(), closed, steps }
    }

    /// Timestamp for a step taken at `now_ms`, bumped past the previous step
    /// when the clock has not advanced.
    pub fn next_timestamp(&self, now_ms: u64) -> u64 {
        match self.steps.last() {
            Some(s) if now_ms <= s.timestamp_ms => s.timestamp_ms + 1,
            _ => now_ms,
        }
    }

    pub fn append(&mut self, now_ms: u64, result: ProbeResult, note: Option<String>) -> Result<&SessionStep, ProbeError> {
        if self.closed {
            return Err(ProbeError::SessionClosed(self.id.clone()));
        }
        let step = SessionStep {
            step: self.steps.len() + 1,
            timestamp_ms: self.next_timestamp(now_ms),
            q1: result.q1.clone(),
            q2: result.q2.clone(),
            expected: result.expected,
            note,
            result,
        };
        self.steps.push(step);
        Ok(self.steps.last().expect("just pushed"))
    }

    pub fn close(&mut self) {
        self.closed = true;
    }
}

/// Re-runs every step through `ensemble`; returns the 1-based numbers of
/// steps whose verdicts differ from the recorded ones.
pub fn replay(ensemble: &Ensemble, steps: &[SessionStep]) -> Result<Vec<usize>, ProbeError> {
    let mut changed = Vec::new();
    for s in steps {
        if ensemble.classify(&s.q1, &s.q2, s.expected)? != s.result {
            changed.push(s.step);
        }
    }
    Ok(changed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use alloc::vec;

    fn ensemble(k: usize) -> Ensemble {
        let lines = ["how do i treat a cold", "what helps a sore throat"];
        let vocab = Vocabulary::build(&lines, 1).unwrap();
        let config = EncoderConfig { layers: 1, heads: 2, hidden: 8, ff_dim: 16, vocab_size: vocab.size(), max_positions: 32, segment_types: 2, dropout: 0.1 };
        let members = (0..k).map(|s| Checkpoint::init(config.clone(), s as u64, vocab.fingerprint()).unwrap()).collect();
        Ensemble::new("qa", members, vocab, 32).unwrap()
    }

    #[test]
    fn thresholds() {
        assert_eq!(default_threshold(5), 4);
        assert_eq!(default_threshold(1), 1);
        assert_eq!(default_threshold(4), 4);
        assert_eq!(default_threshold(10), 8);
        for k in 1..20 {
            assert!(2 * default_threshold(k) > k);
        }
    }

    #[test]
    fn status_rule() {
        assert_eq!(probe_status(&[0, 0, 0, 0, 1], 1, 4), ProbeStatus::ConsistentErrorCandidate);
        assert_eq!(probe_status(&[1, 1, 1, 1, 0], 1, 4), ProbeStatus::ConsistentCorrectCandidate);
        assert_eq!(probe_status(&[0, 0, 0, 1, 1], 1, 4), ProbeStatus::Mixed);
        assert_eq!(majority(&[1, 0, 1, 0]), (0, true));
        assert_eq!(majority(&[1, 1, 0]), (1, false));
    }

    #[test]
    fn classify_is_deterministic_and_well_formed() {
        let e = ensemble(5);
        let r = e.classify("how do i treat a cold", "what helps a sore throat", Some(1)).unwrap();
        assert_eq!(r.verdicts.len(), 5);
        for v in &r.verdicts {
            assert!((0.0..=1.0).contains(&v.probability));
            assert_eq!(v.label, u8::from(v.probability > 0.5));
        }
        let labels: Vec<u8> = r.verdicts.iter().map(|v| v.label).collect();
        assert_eq!(r.status, Some(probe_status(&labels, 1, 4)));
        assert!(!r.majority_tie);
        assert_eq!(r, e.classify("how do i treat a cold", "what helps a sore throat", Some(1)).unwrap());
        assert_eq!(e.classify("a", "b", None).unwrap().status, None);
        assert_eq!(e.classify("a", "b", Some(2)), Err(ProbeError::InvalidExpected(2)));
        assert!(matches!(e.classify("", "b", None), Err(ProbeError::Tokenizer(_))));
    }

    #[test]
    fn ensemble_members_must_agree() {
        let e = ensemble(2);
        let mut members = e.members.clone();
        members[1].vocab_fingerprint ^= 1;
        assert_eq!(Ensemble::new("x", members, e.vocab.clone(), 32).unwrap_err(), ProbeError::VocabMismatch { index: 1 });
        let mut members = e.members.clone();
        members[1].config.dropout = 0.0;
        assert_eq!(Ensemble::new("x", members, e.vocab.clone(), 32).unwrap_err(), ProbeError::ConfigMismatch { index: 1 });
        assert_eq!(Ensemble::new("x", vec![], e.vocab.clone(), 32).unwrap_err(), ProbeError::EmptyEnsemble);
    }

    #[test]
    fn session_is_append_only_and_replays() {
        let e = ensemble(5);
        let mut s = ProbeSession::new("s1");
        for (i, q2) in ["what helps a sore throat", "what helps a cold", "how do i treat a cold"].iter().enumerate() {
            let r = e.classify("how do i treat a cold", q2, Some(1)).unwrap();
            s.append(1000, r, Some(alloc::format!("edit {i}"))).unwrap();
        }
        assert_eq!(s.steps.len(), 3);
        assert!(s.steps.windows(2).all(|w| w[0].timestamp_ms < w[1].timestamp_ms));
        assert_eq!(s.steps.iter().map(|x| x.step).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(replay(&e, &s.steps).unwrap().is_empty());
        s.close();
        let r = e.classify("a", "b", None).unwrap();
        assert_eq!(s.append(5000, r, None).unwrap_err(), ProbeError::SessionClosed("s1".into()));

        let mut tampered = s.steps.clone();
        tampered[1].result.verdicts[0].label ^= 1;
        assert_eq!(replay(&e, &tampered).unwrap(), vec![2]);
    }
}
