//! Accuracy over k splits, mean ± population std, consistent-error sets,
//! condition comparison and learning-curve tables.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::PairRecord;
use crate::encoder::{argmax_label, pair_logits, positive_probability, Checkpoint, EncoderError};
use crate::fingerprint::Fnv64;
use crate::tokenizer::{encode_pair, TokenizerError, Vocabulary};

/// Version of the serialized report layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Default "at least 4 of 5" rule.
pub const DEFAULT_THRESHOLD: usize = 4;

pub const STD_KIND: &str = "population";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("checkpoint was trained with vocabulary {checkpoint:016x}, got {vocab:016x}")]
    VocabMismatch { checkpoint: u64, vocab: u64 },
    #[error("no split results to aggregate")]
    NoResults,
    #[error("split {split} has {found} predictions, expected {expected}")]
    PredictionCount { split: usize, expected: usize, found: usize },
    #[error("split {split} disagrees with split 0 on gold labels")]
    GoldMismatch { split: usize },
    #[error("threshold {threshold} exceeds k = {k}")]
    ThresholdTooLarge { threshold: usize, k: usize },
    #[error("threshold {threshold} of k = {k} is not a strict majority; the two sets would overlap")]
    ThresholdNotMajority { threshold: usize, k: usize },
    #[error("vote row {row} has {found} votes, expected {expected}")]
    VoteShape { row: usize, expected: usize, found: usize },
    #[error("vote matrix has {rows} rows but {gold} gold labels")]
    GoldLength { rows: usize, gold: usize },
    #[error("reports were computed on different test sets")]
    TestSetMismatch,
    #[error("reports use different split counts: {0} and {1}")]
    SplitCountMismatch(usize, usize),
    #[error("duplicate report for condition {condition:?} at size {train_size:?}")]
    DuplicateReport { condition: String, train_size: Option<usize> },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T, E = EvalError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Index into the test set.
    pub pair_id: usize,
    pub label: u8,
    /// Probability of label 1.
    pub probability: f64,
    pub gold: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_index: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub predictions: Vec<Prediction>,
}

/// Builds a result whose accuracy is the exact fraction of correct
/// predictions.
pub fn score(split_index: usize, seed: u64, predictions: Vec<Prediction>) -> Result<SplitResult> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let correct = predictions.iter().filter(|p| p.label == p.gold).count();
    let test_accuracy = correct as f64 / predictions.len() as f64;
    Ok(SplitResult { split_index, seed, test_accuracy, predictions })
}

/// Hash of the ordered test set, used to check that reports are comparable.
pub fn test_fingerprint(test: &[PairRecord]) -> u64 {
    let mut h = Fnv64::new();
    for p in test {
        h.write_str(&p.q1).write_str(&p.q2).write(&[p.label]);
    }
    h.finish()
}

/// Inference-mode accuracy of one checkpoint on a labeled test set.
pub fn evaluate(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    test: &[PairRecord],
    split_index: usize,
    max_len: usize,
    batch_size: usize,
) -> Result<SplitResult> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if ckpt.vocab_fingerprint != vocab.fingerprint() {
        return Err(EvalError::VocabMismatch { checkpoint: ckpt.vocab_fingerprint, vocab: vocab.fingerprint() });
    }
    let encoded = test.iter().map(|p| encode_pair(vocab, &p.q1, &p.q2, max_len, Some(p.label))).collect::<Result<Vec<_>, _>>()?;
    let logits = pair_logits(&ckpt.config, &ckpt.weights, &encoded, batch_size)?;
    let predictions = logits
        .iter()
        .zip(test)
        .enumerate()
        .map(|(pair_id, (&l, p))| Prediction { pair_id, label: argmax_label(l), probability: positive_probability(l), gold: p.label })
        .collect();
    score(split_index, ckpt.seed, predictions)
}

/// Mean and population standard deviation (two passes).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Renders fractions as `"81.6% ± 0.8%"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1}% ± {:.1}%", clean_zero(mean * 100.0), clean_zero(std * 100.0))
}

fn clean_zero(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

/// Accuracy over the k split models of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub condition: String,
    /// Final-task training size, when the run is part of a learning curve.
    pub train_size: Option<usize>,
    pub test_fingerprint: u64,
    pub splits: Vec<SplitResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub std_kind: String,
    pub rendered: String,
    /// `vote_matrix[pair][split]`
    pub vote_matrix: Vec<Vec<u8>>,
    pub gold: Vec<u8>,
}

impl EnsembleReport {
    pub fn k(&self) -> usize {
        self.splits.len()
    }

    pub fn consistency(&self, threshold: usize) -> Result<ConsistencyReport> {
        let mut r = consistency(&self.vote_matrix, &self.gold, threshold)?;
        r.test_fingerprint = Some(self.test_fingerprint);
        Ok(r)
    }
}

pub fn aggregate(condition: &str, train_size: Option<usize>, test_fingerprint: u64, results: Vec<SplitResult>) -> Result<EnsembleReport> {
    let first = results.first().ok_or(EvalError::NoResults)?;
    let n = first.predictions.len();
    let gold: Vec<u8> = first.predictions.iter().map(|p| p.gold).collect();
    for r in &results {
        if r.predictions.len() != n {
            return Err(EvalError::PredictionCount { split: r.split_index, expected: n, found: r.predictions.len() });
        }
        if r.predictions.iter().zip(&gold).any(|(p, g)| p.gold != *g) {
            return Err(EvalError::GoldMismatch { split: r.split_index });
        }
    }
    let accs: Vec<f64> = results.iter().map(|r| r.test_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let vote_matrix = (0..n).map(|i| results.iter().map(|r| r.predictions[i].label).collect()).collect();
    Ok(EnsembleReport {
        condition: condition.to_string(),
        train_size,
        test_fingerprint,
        mean_accuracy,
        std_accuracy,
        std_kind: STD_KIND.to_string(),
        rendered: format_mean_std(mean_accuracy, std_accuracy),
        vote_matrix,
        gold,
        splits: results,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub threshold: usize,
    pub k: usize,
    pub n: usize,
    pub test_fingerprint: Option<u64>,
    pub consistent_errors: BTreeSet<usize>,
    pub consistent_correct: BTreeSet<usize>,
}

/// A pair is a consistent error when at least `threshold` of the k votes
/// differ from gold, consistently correct when at least `threshold` agree.
pub fn consistency(vote_matrix: &[Vec<u8>], gold: &[u8], threshold: usize) -> Result<ConsistencyReport> {
    if vote_matrix.len() != gold.len() {
        return Err(EvalError::GoldLength { rows: vote_matrix.len(), gold: gold.len() });
    }
    let k = vote_matrix.first().map_or(0, Vec::len);
    if threshold > k {
        return Err(EvalError::ThresholdTooLarge { threshold, k });
    }
    if 2 * threshold <= k {
        return Err(EvalError::ThresholdNotMajority { threshold, k });
    }
    let mut report = ConsistencyReport {
        threshold,
        k,
        n: gold.len(),
        test_fingerprint: None,
        consistent_errors: BTreeSet::new(),
        consistent_correct: BTreeSet::new(),
    };
    for (row, (votes, &g)) in vote_matrix.iter().zip(gold).enumerate() {
        if votes.len() != k {
            return Err(EvalError::VoteShape { row, expected: k, found: votes.len() });
        }
        let right = votes.iter().filter(|&&v| v == g).count();
        if k - right >= threshold {
            report.consistent_errors.insert(row);
        } else if right >= threshold {
            report.consistent_correct.insert(row);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyDiff {
    /// Consistently wrong under `a`, consistently right under `b`.
    pub a_wrong_b_right: BTreeSet<usize>,
    pub b_wrong_a_right: BTreeSet<usize>,
}

pub fn diff_consistency(a: &ConsistencyReport, b: &ConsistencyReport) -> Result<ConsistencyDiff> {
    let fp_clash = matches!((a.test_fingerprint, b.test_fingerprint), (Some(x), Some(y)) if x != y);
    if a.n != b.n || fp_clash {
        return Err(EvalError::TestSetMismatch);
    }
    Ok(ConsistencyDiff {
        a_wrong_b_right: a.consistent_errors.intersection(&b.consistent_correct).copied().collect(),
        b_wrong_a_right: b.consistent_errors.intersection(&a.consistent_correct).copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub condition: String,
    pub train_size: Option<usize>,
    pub mean: f64,
    pub std: f64,
    pub rendered: String,
}

/// `mean(minuend) - mean(subtrahend)` in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub minuend: String,
    pub subtrahend: String,
    pub per_size: Vec<SizeGap>,
    /// Mean of `per_size`; `None` when no size has both conditions.
    pub average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeGap {
    pub train_size: Option<usize>,
    pub points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<TableRow>,
    /// One entry per pair of conditions, later condition minus earlier.
    pub gaps: Vec<Gap>,
}

fn distinct_in_order<'a, T: Ord + Clone + 'a>(items: impl Iterator<Item = &'a T>) -> Vec<T> {
    let mut seen = BTreeSet::new();
    items.filter(|x| seen.insert((*x).clone())).cloned().collect()
}

/// Table rows in input order, plus gaps between every pair of conditions
/// in order of first appearance, per train size in ascending order.
pub fn compare_conditions(reports: &[EnsembleReport]) -> Result<Comparison> {
    if let Some(first) = reports.first() {
        for r in reports {
            if r.test_fingerprint != first.test_fingerprint {
                return Err(EvalError::TestSetMismatch);
            }
            if r.k() != first.k() {
                return Err(EvalError::SplitCountMismatch(first.k(), r.k()));
            }
        }
    }
    let mut by_key: BTreeMap<(&str, Option<usize>), f64> = BTreeMap::new();
    for r in reports {
        if by_key.insert((&r.condition, r.train_size), r.mean_accuracy).is_some() {
            return Err(EvalError::DuplicateReport { condition: r.condition.clone(), train_size: r.train_size });
        }
    }
    let conditions: Vec<String> = distinct_in_order(reports.iter().map(|r| &r.condition));
    let sizes: BTreeSet<Option<usize>> = reports.iter().map(|r| r.train_size).collect();
    let rows = reports
        .iter()
        .map(|r| TableRow {
            condition: r.condition.clone(),
            train_size: r.train_size,
            mean: r.mean_accuracy,
            std: r.std_accuracy,
            rendered: r.rendered.clone(),
        })
        .collect();
    let mut gaps = Vec::new();
    for (i, earlier) in conditions.iter().enumerate() {
        for later in &conditions[i + 1..] {
            let per_size: Vec<SizeGap> = sizes
                .iter()
                .filter_map(|&s| {
                    let a = by_key.get(&(later.as_str(), s))?;
                    let b = by_key.get(&(earlier.as_str(), s))?;
                    Some(SizeGap { train_size: s, points: (a - b) * 100.0 })
                })
                .collect();
            let average = (!per_size.is_empty()).then(|| per_size.iter().map(|g| g.points).sum::<f64>() / per_size.len() as f64);
            gaps.push(Gap { minuend: later.clone(), subtrahend: earlier.clone(), per_size, average });
        }
    }
    Ok(Comparison { rows, gaps })
}

impl Comparison {
    pub fn gap(&self, minuend: &str, subtrahend: &str) -> Option<&Gap> {
        self.gaps.iter().find(|g| g.minuend == minuend && g.subtrahend == subtrahend)
    }

    /// Plain-text table: one row per condition, one column per train size.
    pub fn render_text(&self) -> String {
        let conditions: Vec<String> = distinct_in_order(self.rows.iter().map(|r| &r.condition));
        let sizes: Vec<Option<usize>> = distinct_in_order(self.rows.iter().map(|r| &r.train_size));
        let label = |s: &Option<usize>| s.map_or_else(|| "accuracy".to_string(), |n| format!("n={n}"));
        let cw = conditions.iter().map(String::len).chain([9]).max().unwrap_or(9);
        let mut out = format!("{:<cw$}", "condition");
        for s in &sizes {
            out += &format!("  {:>15}", label(s));
        }
        out.push('\n');
        for c in &conditions {
            out += &format!("{c:<cw$}");
            for s in &sizes {
                let cell = self.rows.iter().find(|r| &r.condition == c && &r.train_size == s).map_or("-", |r| r.rendered.as_str());
                out += &format!("  {cell:>15}");
            }
            out.push('\n');
        }
        for g in &self.gaps {
            out += &format!("\n{} - {}:", g.minuend, g.subtrahend);
            for sg in &g.per_size {
                out += &format!(" {} {:+.1}", label(&sg.train_size), sg.points);
            }
            if let Some(avg) = g.average {
                out += &format!(" | average {avg:+.1} points");
            }
        }
        if !self.gaps.is_empty() {
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub condition: String,
    pub train_size: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Number of split results behind the row.
    pub splits: usize,
    /// False when the run is missing or has fewer than the expected splits.
    pub complete: bool,
}

/// One row per (condition, size) in the given order. Missing or partial
/// runs are flagged, not dropped.
pub fn learning_curve(reports: &[EnsembleReport], conditions: &[String], sizes: &[usize], expected_k: usize) -> Vec<CurveRow> {
    let mut rows = Vec::with_capacity(conditions.len() * sizes.len());
    for c in conditions {
        for &s in sizes {
            let found = reports.iter().find(|r| &r.condition == c && r.train_size == Some(s));
            rows.push(match found {
                Some(r) => CurveRow {
                    condition: c.clone(),
                    train_size: s,
                    mean: Some(r.mean_accuracy),
                    std: Some(r.std_accuracy),
                    splits: r.k(),
                    complete: r.k() == expected_k,
                },
                None => CurveRow { condition: c.clone(), train_size: s, mean: None, std: None, splits: 0, complete: false },
            });
        }
    }
    rows
}

/// Plain-text rendering of a learning-curve table.
pub fn render_curve_text(rows: &[CurveRow]) -> String {
    let cw = rows.iter().map(|r| r.condition.len()).chain([9]).max().unwrap_or(9);
    let mut out = format!("{:<cw$}  {:>6}  {:>15}\n", "condition", "size", "accuracy");
    for r in rows {
        let cell = match (r.mean, r.std) {
            (Some(m), Some(s)) if r.complete => format_mean_std(m, s),
            (Some(m), Some(s)) => format!("{} (partial)", format_mean_std(m, s)),
            _ => "missing".to_string(),
        };
        out += &format!("{:<cw$}  {:>6}  {:>15}\n", r.condition, r.train_size, cell);
    }
    out
}
