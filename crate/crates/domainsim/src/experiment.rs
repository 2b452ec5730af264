//! The condition × train-size × split grid: intermediate stages trained
//! once per condition, then one final stage per split and size, each
//! evaluated on the shared test set.

use std::path::{Path, PathBuf};
use std::time::Instant;

use domainsim_core::datasets::{
    build_qa_intermediate_pairs, generate_synthetic, leakage_gate, learning_curve_subsets, make_splits, question_set, DatasetError, DatasetSplit,
    PairRecord, SkipReport, SyntheticSpec,
};
use domainsim_core::{derive_seed, seeded_rng};
use domainsim_core::encoder::{Checkpoint, EncoderConfig, HeadPolicy};
use domainsim_core::evaluation::{aggregate, compare_conditions, evaluate, learning_curve, test_fingerprint, EnsembleReport, EvalError, SplitResult};
use domainsim_core::tokenizer::{encode_pair, encode_single, EncodedPair, TokenizerError, Vocabulary};
use domainsim_core::training::{train_stage, Objective, Stage, StageData, TrainConfig, TrainError};
use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::files::{self, FileError};
use crate::report::{ExperimentReport, IntermediateSummary};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("intermediate datasets differ in size: qa {qa} pairs, qq {qq} pairs")]
    UnequalIntermediate { qa: usize, qq: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{stage}: {source}")]
    Train { stage: String, source: TrainError },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Which intermediate task precedes the final stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    None,
    /// Out-of-domain question–question pairs.
    Qq,
    /// In-domain question–answer pairs.
    Qa,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::None => "none",
            Condition::Qq => "qq",
            Condition::Qa => "qa",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Condition::None => 0x100,
            Condition::Qq => 0x101,
            Condition::Qa => 0x102,
        }
    }
}

/// Encoder shape without the vocabulary size, which comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl EncoderShape {
    pub fn with_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            ff_dim: self.ff_dim,
            vocab_size,
            max_positions: self.max_positions,
            segment_types: 2,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSource {
    Path(PathBuf),
    Inline(Box<SyntheticSpec>),
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

fn default_threshold() -> usize {
    4
}

fn default_intermediate_validation() -> f64 {
    0.1
}

fn default_min_count() -> usize {
    1
}

fn default_eval_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub seed: u64,
    /// Path relative to the grid file, or the synthetic spec itself.
    pub synthetic_spec: SpecSource,
    pub conditions: Vec<Condition>,
    pub sizes: Vec<usize>,
    pub k: usize,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    /// Share of each intermediate dataset held out for early stopping.
    #[serde(default = "default_intermediate_validation")]
    pub intermediate_validation: f64,
    pub encoder: EncoderShape,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Masked-token pretraining on the intermediate text, shared by every
    /// condition before its intermediate stage.
    #[serde(default)]
    pub pretraining: Option<TrainConfig>,
    pub intermediate: TrainConfig,
    #[serde(rename = "final")]
    pub final_stage: TrainConfig,
    #[serde(default)]
    pub final_head_policy: HeadPolicy,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_threshold")]
    pub threshold: usize,
    /// Externally measured oracle accuracy, copied into the report.
    #[serde(default)]
    pub oracle_accuracy: Option<f64>,
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let mut grid: GridConfig = files::read_json(path)?;
        if let SpecSource::Path(p) = &grid.synthetic_spec {
            let full = path.parent().unwrap_or(Path::new(".")).join(p);
            grid.synthetic_spec = SpecSource::Inline(Box::new(files::read_json(&full)?));
        }
        Ok(grid)
    }

    pub fn spec(&self) -> Result<&SyntheticSpec, ExperimentError> {
        match &self.synthetic_spec {
            SpecSource::Inline(s) => Ok(s),
            SpecSource::Path(p) => Err(ExperimentError::Invalid(format!("spec {} was not resolved; use GridConfig::load", p.display()))),
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.conditions.is_empty() {
            return bad("no conditions");
        }
        let mut seen = self.conditions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.conditions.len() {
            return bad("duplicate condition");
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("sizes must be non-empty and positive");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(0.0..1.0).contains(&self.intermediate_validation) {
            return bad("intermediate_validation must be in [0, 1)");
        }
        self.intermediate.validate().map_err(|e| ExperimentError::Invalid(format!("intermediate: {e}")))?;
        self.final_stage.validate().map_err(|e| ExperimentError::Invalid(format!("final: {e}")))?;
        Ok(())
    }
}

/// All data of one grid, derived deterministically from its config.
pub struct Prepared {
    pub vocab: Vocabulary,
    pub splits: Vec<DatasetSplit>,
    /// `subsets[split][size]`
    pub subsets: Vec<Vec<Vec<PairRecord>>>,
    pub qa: Vec<PairRecord>,
    pub qa_skipped: SkipReport,
    pub qq: Vec<PairRecord>,
}

const SPLIT_STREAM: u64 = 0x5917;
const QA_STREAM: u64 = 0x0a0a;
const INTERMEDIATE_STREAM: u64 = 0x1e7e;
const CURVE_STREAM: u64 = 0xc0e7;
const INIT_STREAM: u64 = 0x1417;
const FINAL_STREAM: u64 = 0xf1a1;
const PRETRAIN_STREAM: u64 = 0x3a5c;

pub fn prepare(grid: &GridConfig) -> Result<Prepared, ExperimentError> {
    grid.validate()?;
    let corpus = generate_synthetic(grid.spec()?)?;
    let splits = make_splits(&corpus.final_pairs, grid.k, grid.fractions, derive_seed(grid.seed, SPLIT_STREAM))?;
    let exclusion = question_set(&corpus.final_pairs);
    let qa = build_qa_intermediate_pairs(&corpus.qa, &exclusion, derive_seed(grid.seed, QA_STREAM));
    let uses = |c| grid.conditions.contains(&c);
    if uses(Condition::Qa) && uses(Condition::Qq) && qa.pairs.len() != corpus.qq.len() {
        return Err(ExperimentError::UnequalIntermediate { qa: qa.pairs.len(), qq: corpus.qq.len() });
    }
    leakage_gate(&corpus.final_pairs, &qa.pairs)?;
    leakage_gate(&corpus.final_pairs, &corpus.qq)?;

    let test: Vec<&PairRecord> = splits[0].test.iter().collect();
    let mut lines = files::corpus_lines(&qa.pairs);
    lines.extend(files::corpus_lines(&corpus.qq));
    lines.extend(files::corpus_lines(corpus.final_pairs.iter().filter(|p| !test.contains(p))));
    let vocab = Vocabulary::build(&lines, grid.min_count)?;

    let subsets = splits
        .iter()
        .map(|s| {
            let mut sizes = grid.sizes.clone();
            sizes.sort_unstable();
            let nested = learning_curve_subsets(&s.train, &sizes, derive_seed(s.seed, CURVE_STREAM))?;
            Ok(grid.sizes.iter().map(|n| nested[sizes.iter().position(|m| m == n).expect("present")].clone()).collect())
        })
        .collect::<Result<_, DatasetError>>()?;
    Ok(Prepared { vocab, splits, subsets, qa: qa.pairs, qa_skipped: qa.skipped, qq: corpus.qq })
}

pub fn encode_all(vocab: &Vocabulary, pairs: &[PairRecord], max_len: usize) -> Result<Vec<EncodedPair>, TokenizerError> {
    pairs.iter().map(|p| encode_pair(vocab, &p.q1, &p.q2, max_len, Some(p.label))).collect()
}

fn train(ckpt: Checkpoint, stage: &Stage, train: &[EncodedPair], validation: &[EncodedPair]) -> Result<Checkpoint, ExperimentError> {
    let mut log_event = |e: &domainsim_core::training::EpochEvent| debug!("{} epoch {}: loss {:.4}, val {:.4}", e.stage, e.epoch, e.train_loss, e.val_acc);
    train_stage(ckpt, stage, &StageData { train, validation }, &mut log_event).map_err(|source| ExperimentError::Train { stage: stage.name.clone(), source })
}

struct FinalJob {
    condition: usize,
    size: usize,
    split: usize,
}

/// Everything a run produces besides the report.
pub struct GridOutcome {
    pub report: ExperimentReport,
    /// `ensembles[(condition, size)]`, one checkpoint per split, when kept.
    pub ensembles: Vec<(Condition, usize, Vec<Checkpoint>)>,
    pub vocab: Vocabulary,
    /// The shared test set.
    pub test: Vec<PairRecord>,
}

/// Runs the whole grid on a pool of `threads` workers (0 = rayon default).
/// The report does not depend on the thread count.
pub fn run_grid(grid: &GridConfig, threads: usize, keep_checkpoints: bool) -> Result<GridOutcome, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| ExperimentError::Pool(e.to_string()))?;
    pool.install(|| run_grid_inner(grid, keep_checkpoints))
}

/// Every distinct intermediate line, shuffled, with the last
/// `intermediate_validation` share held out.
fn pretrain(grid: &GridConfig, data: &Prepared, base: Checkpoint, config: &TrainConfig) -> Result<(Checkpoint, IntermediateSummary), ExperimentError> {
    let mut lines = files::corpus_lines(&data.qa);
    lines.extend(files::corpus_lines(&data.qq));
    lines.sort();
    lines.dedup();
    lines.shuffle(&mut seeded_rng(derive_seed(grid.seed, PRETRAIN_STREAM)));
    let held = ((lines.len() as f64 * grid.intermediate_validation).round() as usize).clamp(1, lines.len().saturating_sub(1).max(1));
    let encoded: Vec<EncodedPair> = lines.iter().map(|l| encode_single(&data.vocab, l, config.max_len)).collect::<Result<_, _>>()?;
    let (train_enc, val_enc) = encoded.split_at(encoded.len() - held);
    let stage = Stage { name: "pretraining".into(), objective: Objective::MaskedToken, config: config.clone(), head_policy: HeadPolicy::Reuse };
    let out = train(base, &stage, train_enc, val_enc)?;
    let rec = out.provenance.last().expect("stage recorded");
    let summary = IntermediateSummary {
        condition: "pretraining".into(),
        train_pairs: train_enc.len(),
        validation_pairs: val_enc.len(),
        epochs_run: rec.epochs_run,
        best_epoch: rec.best_epoch,
        best_validation_accuracy: rec.best_metric,
    };
    Ok((out, summary))
}

fn run_grid_inner(grid: &GridConfig, keep_checkpoints: bool) -> Result<GridOutcome, ExperimentError> {
    let started = Instant::now();
    let data = prepare(grid)?;
    let vocab = &data.vocab;
    let config = grid.encoder.with_vocab(vocab.size());
    let base = Checkpoint::init(config, derive_seed(grid.seed, INIT_STREAM), vocab.fingerprint()).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    info!("data ready: vocab {}, qa {} pairs, qq {} pairs, test {}", vocab.size(), data.qa.len(), data.qq.len(), data.splits[0].test.len());
    let (base, pretraining) = match &grid.pretraining {
        None => (base, None),
        Some(config) => {
            let t = Instant::now();
            let (out, summary) = pretrain(grid, &data, base, config)?;
            info!("pretraining done in {:.1}s: {} epochs, best val {:?}", t.elapsed().as_secs_f64(), summary.epochs_run, summary.best_validation_accuracy);
            (out, Some(summary))
        }
    };

    let starts: Vec<(Checkpoint, Option<IntermediateSummary>)> = grid
        .conditions
        .par_iter()
        .map(|&c| {
            let pairs = match c {
                Condition::None => return Ok((base.clone(), None)),
                Condition::Qq => &data.qq,
                Condition::Qa => &data.qa,
            };
            let f = grid.intermediate_validation;
            let split = make_splits(pairs, 1, [1.0 - f, f, 0.0], derive_seed(grid.seed, INTERMEDIATE_STREAM ^ c.stream()))?.remove(0);
            let max_len = grid.intermediate.max_len;
            let train_enc = encode_all(vocab, &split.train, max_len)?;
            let val_enc = encode_all(vocab, &split.validation, max_len)?;
            let stage = Stage {
                name: c.name().to_string(),
                objective: Objective::PairClassification,
                config: TrainConfig { seed: derive_seed(grid.intermediate.seed, c.stream()), ..grid.intermediate.clone() },
                head_policy: HeadPolicy::Reuse,
            };
            let t = Instant::now();
            let out = train(base.clone(), &stage, &train_enc, &val_enc)?;
            let rec = out.provenance.last().expect("stage recorded");
            info!("intermediate {} done in {:.1}s: {} epochs, best val {:?}", c.name(), t.elapsed().as_secs_f64(), rec.epochs_run, rec.best_metric);
            let summary = IntermediateSummary {
                condition: c.name().to_string(),
                train_pairs: split.train.len(),
                validation_pairs: split.validation.len(),
                epochs_run: rec.epochs_run,
                best_epoch: rec.best_epoch,
                best_validation_accuracy: rec.best_metric,
            };
            Ok((out, Some(summary)))
        })
        .collect::<Result<_, ExperimentError>>()?;

    let test = &data.splits[0].test;
    let test_fp = test_fingerprint(test);
    let final_max_len = grid.final_stage.max_len;
    let validation: Vec<Vec<EncodedPair>> = data.splits.iter().map(|s| encode_all(vocab, &s.validation, final_max_len)).collect::<Result<_, _>>()?;
    let jobs: Vec<FinalJob> = (0..grid.conditions.len())
        .flat_map(|condition| (0..grid.sizes.len()).flat_map(move |size| (0..grid.k).map(move |split| FinalJob { condition, size, split })))
        .collect();
    let results: Vec<(SplitResult, Option<Checkpoint>)> = jobs
        .par_iter()
        .map(|job| {
            let train_pairs = &data.subsets[job.split][job.size];
            let train_enc = encode_all(vocab, train_pairs, final_max_len)?;
            let n = grid.sizes[job.size];
            let seed = derive_seed(derive_seed(grid.final_stage.seed, FINAL_STREAM ^ job.split as u64), n as u64);
            let stage = Stage {
                name: "final".into(),
                objective: Objective::PairClassification,
                config: TrainConfig { seed, ..grid.final_stage.clone() },
                head_policy: grid.final_head_policy,
            };
            let ckpt = train(starts[job.condition].0.clone(), &stage, &train_enc, &validation[job.split])?;
            let mut r = evaluate(&ckpt, vocab, test, job.split, final_max_len, grid.eval_batch)?;
            r.seed = seed;
            info!("{} n={} split {}: test {:.3}", grid.conditions[job.condition].name(), n, job.split, r.test_accuracy);
            Ok((r, keep_checkpoints.then_some(ckpt)))
        })
        .collect::<Result<_, ExperimentError>>()?;

    let mut reports: Vec<EnsembleReport> = Vec::new();
    let mut ensembles = Vec::new();
    let mut it = results.into_iter();
    for &c in &grid.conditions {
        for &n in &grid.sizes {
            let (split_results, ckpts): (Vec<SplitResult>, Vec<Option<Checkpoint>>) = it.by_ref().take(grid.k).unzip();
            reports.push(aggregate(c.name(), Some(n), test_fp, split_results)?);
            if keep_checkpoints {
                ensembles.push((c, n, ckpts.into_iter().flatten().collect()));
            }
        }
    }
    let comparison = compare_conditions(&reports)?;
    let names: Vec<String> = grid.conditions.iter().map(|c| c.name().to_string()).collect();
    let curve = learning_curve(&reports, &names, &grid.sizes, grid.k);
    let consistency = reports.iter().map(|r| r.consistency(grid.threshold)).collect::<Result<_, _>>()?;
    info!("grid finished in {:.1}s", started.elapsed().as_secs_f64());
    let report = ExperimentReport::new(
        grid.clone(),
        vocab.size(),
        test.len(),
        data.qa_skipped.clone(),
        pretraining.into_iter().chain(starts.into_iter().filter_map(|(_, s)| s)).collect(),
        reports,
        consistency,
        comparison,
        curve,
    );
    let test = data.splits[0].test.clone();
    Ok(GridOutcome { report, ensembles, vocab: data.vocab, test })
}

/// Writes `report.json`, `report.txt`, `curve.svg` and, when checkpoints were
/// kept, one probe-ready directory per (condition, size).
pub fn write_outcome(out_dir: &Path, outcome: &GridOutcome) -> Result<(), ExperimentError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| FileError::Io { path: p, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    outcome.report.write(out_dir)?;
    for (c, n, ckpts) in &outcome.ensembles {
        let dir = out_dir.join("ensembles").join(format!("{}-n{n}", c.name()));
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        files::save_vocab(&dir.join("vocab.txt"), &outcome.vocab)?;
        for (i, ck) in ckpts.iter().enumerate() {
            checkpoint::save(&dir.join(format!("split-{i}.ckpt")), ck)?;
        }
        let report = outcome.report.reports.iter().find(|r| r.condition == c.name() && r.train_size == Some(*n)).expect("report exists");
        files::write_json(&dir.join("report.json"), report)?;
        files::write_jsonl(&dir.join("test.jsonl"), &outcome.test)?;
    }
    Ok(())
}
