//! Corpus records, intermediate QA-pair construction, leakage checks,
//! balanced splits, learning-curve subsets and the synthetic two-domain
//! generator.

mod synthetic;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{derive_seed, seeded_rng};

pub use synthetic::{generate_synthetic, DomainSpec, IntentSpec, SynonymCluster, SyntheticCorpus, SyntheticSizes, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("split count k must be at least 1")]
    ZeroSplits,
    #[error("fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("test set of {needed} per label needs more pairs: {positives} positive, {negatives} negative available")]
    CannotBalance { needed: usize, positives: usize, negatives: usize },
    #[error("subset size {size} exceeds training set of {available}")]
    SubsetTooLarge { size: usize, available: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("leakage: {count} question strings shared with the final task, e.g. {example:?}")]
    Leakage { count: usize, example: String },
}

/// One question with its true answer and an opaque category key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QARecord {
    pub question: String,
    pub answer: String,
    pub category: String,
}

/// Where a pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSource {
    QaPos,
    QaNeg,
    Qq,
    Synthetic,
    /// Loaded from a file that carries no source tag.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairRecord {
    pub q1: String,
    pub q2: String,
    pub label: u8,
    pub source: PairSource,
}

impl PairRecord {
    pub fn new(q1: impl Into<String>, q2: impl Into<String>, label: u8, source: PairSource) -> Self {
        Self { q1: q1.into(), q2: q2.into(), label, source }
    }
}

/// Records left out of the intermediate QA pairs, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    /// Only record in its category.
    pub singleton_category: usize,
    /// Question listed in the exclusion set.
    pub excluded: usize,
    /// Every answer in the category equals the record's own answer.
    pub no_distinct_answer: usize,
}

impl SkipReport {
    pub fn total(&self) -> usize {
        self.singleton_category + self.excluded + self.no_distinct_answer
    }
}

/// Output of [`build_qa_intermediate_pairs`].
#[derive(Debug, Clone, PartialEq)]
pub struct QaPairs {
    pub pairs: Vec<PairRecord>,
    pub skipped: SkipReport,
}

/// Removes records whose (question, answer) already occurred; returns the
/// survivors in first-occurrence order and the number dropped.
pub fn dedup_qa(records: Vec<QARecord>) -> (Vec<QARecord>, usize) {
    let mut seen = BTreeSet::new();
    let before = records.len();
    let kept: Vec<QARecord> = records.into_iter().filter(|r| seen.insert((r.question.clone(), r.answer.clone()))).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// For every eligible record, one positive (question, true answer) and one
/// negative (question, answer drawn uniformly from the distinct answers of
/// the same category other than the true one).
///
/// Records whose question is in `exclusion` are dropped; their answers stay
/// in the category pool. Records alone in their category are skipped.
pub fn build_qa_intermediate_pairs(records: &[QARecord], exclusion: &BTreeSet<String>, seed: u64) -> QaPairs {
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_category.entry(r.category.as_str()).or_default().push(i);
    }
    let answers: BTreeMap<&str, Vec<&str>> = by_category
        .iter()
        .map(|(&c, idx)| {
            let mut seen = BTreeSet::new();
            let distinct = idx.iter().map(|&i| records[i].answer.as_str()).filter(|a| seen.insert(*a)).collect();
            (c, distinct)
        })
        .collect();

    let mut rng = seeded_rng(seed);
    let mut out = QaPairs { pairs: Vec::new(), skipped: SkipReport::default() };
    for r in records {
        if exclusion.contains(&r.question) {
            out.skipped.excluded += 1;
            continue;
        }
        if by_category[r.category.as_str()].len() < 2 {
            out.skipped.singleton_category += 1;
            continue;
        }
        let candidates: Vec<&str> = answers[r.category.as_str()].iter().copied().filter(|a| *a != r.answer).collect();
        let Some(&negative) = candidates.choose(&mut rng) else {
            out.skipped.no_distinct_answer += 1;
            continue;
        };
        out.pairs.push(PairRecord::new(r.question.clone(), r.answer.clone(), 1, PairSource::QaPos));
        out.pairs.push(PairRecord::new(r.question.clone(), negative, 0, PairSource::QaNeg));
    }
    out
}

/// Every question string of a pair set (both sides).
pub fn question_set(pairs: &[PairRecord]) -> BTreeSet<String> {
    pairs.iter().flat_map(|p| [p.q1.clone(), p.q2.clone()]).collect()
}

/// Question strings of `intermediate` that also occur in `final_questions`.
/// For QA pairs only the question side is compared; answers are not
/// questions.
pub fn leaked_questions(final_questions: &BTreeSet<String>, intermediate: &[PairRecord]) -> BTreeSet<String> {
    intermediate
        .iter()
        .flat_map(|p| match p.source {
            PairSource::QaPos | PairSource::QaNeg => alloc::vec![&p.q1],
            _ => alloc::vec![&p.q1, &p.q2],
        })
        .filter(|q| final_questions.contains(*q))
        .cloned()
        .collect()
}

/// Fails when any intermediate question occurs in the final task.
pub fn leakage_gate(final_pairs: &[PairRecord], intermediate: &[PairRecord]) -> Result<(), DatasetError> {
    let leaked = leaked_questions(&question_set(final_pairs), intermediate);
    match leaked.iter().next() {
        None => Ok(()),
        Some(example) => Err(DatasetError::Leakage { count: leaked.len(), example: example.clone() }),
    }
}

/// Train/validation/test partition. The test set is shared by every split
/// of one [`make_splits`] call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<PairRecord>,
    pub validation: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
    pub seed: u64,
}

/// Number of test pairs for `n` pairs: `round(test_fraction * n)` rounded
/// down to even.
pub fn test_size(n: usize, test_fraction: f64) -> usize {
    let t = libm::round(test_fraction * n as f64) as usize;
    t - t % 2
}

const TEST_STREAM: u64 = 0x7e57;

/// `k` splits with fractions `(train, validation, test)`. Identical
/// `(q1, q2)` pairs are collapsed first so partitions are disjoint. The
/// label-balanced test set is drawn once; each split reshuffles the rest
/// into train and validation with its own derived seed.
pub fn make_splits(pairs: &[PairRecord], k: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<DatasetSplit>, DatasetError> {
    if k == 0 {
        return Err(DatasetError::ZeroSplits);
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || libm::fabs(fractions.iter().sum::<f64>() - 1.0) > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    let mut seen = BTreeSet::new();
    let unique: Vec<&PairRecord> = pairs.iter().filter(|p| seen.insert((p.q1.as_str(), p.q2.as_str()))).collect();
    let n = unique.len();
    let n_test = test_size(n, fractions[2]);
    let mut pos: Vec<usize> = (0..n).filter(|&i| unique[i].label == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| unique[i].label != 1).collect();
    if pos.len() < n_test / 2 || neg.len() < n_test / 2 {
        return Err(DatasetError::CannotBalance { needed: n_test / 2, positives: pos.len(), negatives: neg.len() });
    }
    let mut rng = seeded_rng(derive_seed(seed, TEST_STREAM));
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut test_idx: Vec<usize> = pos[..n_test / 2].iter().chain(&neg[..n_test / 2]).copied().collect();
    test_idx.sort_unstable();
    let in_test: BTreeSet<usize> = test_idx.iter().copied().collect();
    let test: Vec<PairRecord> = test_idx.iter().map(|&i| unique[i].clone()).collect();
    let rest: Vec<usize> = (0..n).filter(|i| !in_test.contains(i)).collect();
    let n_val = (libm::round(fractions[1] * n as f64) as usize).min(rest.len());

    Ok((0..k)
        .map(|s| {
            let split_seed = derive_seed(seed, s as u64);
            let mut order = rest.clone();
            order.shuffle(&mut seeded_rng(split_seed));
            let (val, train) = order.split_at(n_val);
            DatasetSplit {
                train: train.iter().map(|&i| unique[i].clone()).collect(),
                validation: val.iter().map(|&i| unique[i].clone()).collect(),
                test: test.clone(),
                seed: split_seed,
            }
        })
        .collect())
}

/// Nested training subsets, one per requested size. Pairs are ordered by
/// alternating shuffled positives and negatives, and each subset is a prefix
/// of that order, so subsets are nested and balanced within one whenever
/// both labels have at least `size / 2` members.
pub fn learning_curve_subsets(train: &[PairRecord], sizes: &[usize], seed: u64) -> Result<Vec<Vec<PairRecord>>, DatasetError> {
    if let Some(&size) = sizes.iter().find(|&&s| s > train.len()) {
        return Err(DatasetError::SubsetTooLarge { size, available: train.len() });
    }
    let mut rng = seeded_rng(seed);
    let mut pos: Vec<&PairRecord> = train.iter().filter(|p| p.label == 1).collect();
    let mut neg: Vec<&PairRecord> = train.iter().filter(|p| p.label != 1).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let first_positive = rng.gen::<bool>();
    let (a, b) = if first_positive { (pos, neg) } else { (neg, pos) };
    let mut order: Vec<&PairRecord> = Vec::with_capacity(train.len());
    for i in 0..a.len().max(b.len()) {
        order.extend(a.get(i));
        order.extend(b.get(i));
    }
    Ok(sizes.iter().map(|&s| order[..s].iter().map(|&p| p.clone()).collect()).collect())
}

#[cfg(test)]
mod tests;
