//! Stage training: Adam over shuffled minibatches with early stopping on a
//! validation metric, plus masked-token pretraining.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Tensor};
use crate::encoder::{
    self, argmax_label, bind, pair_logits, reinit_pair_head, Batch, Checkpoint, EncoderConfig, EncoderError, EncoderWeights,
    HeadPolicy, Mode, StageRecord,
};
use crate::fingerprint::Fnv64;
use crate::optim::{AdamState, OptimError};
use crate::tokenizer::{EncodedPair, NUM_SPECIALS, UNK_ID};
use crate::{derive_seed, seeded_rng, SeedRng};

/// Token id written over masked positions. The vocabulary carries only the
/// four standard specials, so masking reuses `[UNK]`.
pub const MASK_ID: u32 = UNK_ID;

/// Fraction of eligible positions selected for masked-token prediction.
pub const DEFAULT_MASK_PROB: f64 = 0.15;

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const HEAD_STREAM: u64 = 3;
const MASK_STREAM: u64 = 4;
const VALIDATION_MASK_STREAM: u64 = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(&'static str),
    #[error("stage {stage}: empty training set")]
    EmptyTrainSet { stage: String },
    #[error("stage {stage}: empty validation set")]
    EmptyValidationSet { stage: String },
    #[error("stage {stage}: training pair {index} has no label")]
    Unlabeled { stage: String, index: usize },
    #[error("stage {stage}: loss diverged at step {step} (epoch {epoch})")]
    Diverged { stage: String, epoch: usize, step: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl From<crate::autograd::AutogradError> for TrainError {
    fn from(e: crate::autograd::AutogradError) -> Self {
        TrainError::Encoder(EncoderError::Autograd(e))
    }
}

/// What a stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    PairClassification,
    MaskedToken,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::PairClassification => "pair-classification",
            Objective::MaskedToken => "masked-token",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub max_epochs: usize,
    /// Evaluations without strict improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Evaluate every this many steps as well as at each epoch end.
    pub eval_every: Option<usize>,
    /// Masked-token stages only: fraction of positions selected.
    pub mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, batch_size: 16, max_len: 200, max_epochs: 20, patience: 3, seed: 0, eval_every: None, mask_prob: DEFAULT_MASK_PROB }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be at least 1"));
        }
        if self.max_len < 5 {
            return Err(TrainError::InvalidConfig("max_len must be at least 5"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(TrainError::InvalidConfig("mask_prob must be in [0, 1]"));
        }
        if self.eval_every == Some(0) {
            return Err(TrainError::InvalidConfig("eval_every must be positive"));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.learning_rate.to_bits())
            .write_u64(self.batch_size as u64)
            .write_u64(self.max_len as u64)
            .write_u64(self.max_epochs as u64)
            .write_u64(self.patience as u64)
            .write_u64(self.seed)
            .write_u64(self.eval_every.map_or(0, |e| e as u64))
            .write_u64(self.mask_prob.to_bits());
        h.finish()
    }
}

/// One training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub objective: Objective,
    pub config: TrainConfig,
    pub head_policy: HeadPolicy,
}

impl Stage {
    /// The `config_fingerprint` this stage records when run on an encoder
    /// with `encoder` config.
    pub fn config_fingerprint(&self, encoder: &EncoderConfig) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(encoder.fingerprint()).write_u64(self.config.fingerprint());
        h.finish()
    }
}

/// Progress record emitted after every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEvent {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Outcome of feeding one validation score to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation score; stops after `patience` evaluations
/// without strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, usize)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, metric: f64, epoch: usize) -> StopDecision {
        match self.best {
            Some((b, _)) if metric <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((metric, epoch));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    /// Best `(metric, epoch)` seen so far.
    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }
}

/// Order-sensitive hash of a set of encoded pairs.
pub fn fingerprint_pairs(pairs: &[EncodedPair]) -> u64 {
    let mut h = Fnv64::new();
    for p in pairs {
        h.write_u64(p.token_ids.len() as u64);
        for (&t, &s) in p.token_ids.iter().zip(&p.segment_ids) {
            h.write_u64(u64::from(t) << 1 | u64::from(s));
        }
        h.write_u64(p.label.map_or(u64::MAX, u64::from));
    }
    h.finish()
}

/// Fraction of pairs whose argmax label matches the gold label.
pub fn pair_accuracy(config: &EncoderConfig, weights: &EncoderWeights, pairs: &[EncodedPair], batch_size: usize) -> Result<f64, TrainError> {
    let logits = pair_logits(config, weights, pairs, batch_size)?;
    let correct = logits.iter().zip(pairs).filter(|(l, p)| p.label == Some(argmax_label(**l))).count();
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

/// How a selected position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    /// Replaced by [`MASK_ID`].
    Mask,
    /// Replaced by a uniformly random non-special id.
    Random,
    /// Left as is.
    Keep,
}

/// A masked copy of a sequence plus its prediction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: EncodedPair,
    /// `(position, original id, action)` for every selected position.
    pub targets: Vec<(usize, u32, MaskAction)>,
}

/// Selects `round(prob * n)` (at least one when `prob > 0`) of the `n`
/// non-special positions, then applies the 80/10/10 corruption.
pub fn mask_tokens(pair: &EncodedPair, vocab_size: usize, prob: f64, rng: &mut SeedRng) -> MaskedSequence {
    let mut eligible: Vec<usize> = (0..pair.len())
        .filter(|&i| pair.attention_mask[i] == 1 && pair.token_ids[i] as usize >= NUM_SPECIALS)
        .collect();
    let mut count = libm::round(prob * eligible.len() as f64) as usize;
    if prob > 0.0 && count == 0 && !eligible.is_empty() {
        count = 1;
    }
    eligible.shuffle(rng);
    let mut chosen: Vec<usize> = eligible.into_iter().take(count).collect();
    chosen.sort_unstable();
    let mut input = pair.clone();
    input.label = None;
    let mut targets = Vec::with_capacity(chosen.len());
    for pos in chosen {
        let original = pair.token_ids[pos];
        let r: f64 = rng.gen();
        let action = if r < 0.8 {
            MaskAction::Mask
        } else if r < 0.9 && vocab_size > NUM_SPECIALS {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        match action {
            MaskAction::Mask => input.token_ids[pos] = MASK_ID,
            MaskAction::Random => input.token_ids[pos] = rng.gen_range(NUM_SPECIALS..vocab_size) as u32,
            MaskAction::Keep => {}
        }
        targets.push((pos, original, action));
    }
    MaskedSequence { input, targets }
}

/// Masked-token accuracy of the model on `masked`.
pub fn masked_token_accuracy(config: &EncoderConfig, weights: &EncoderWeights, masked: &[MaskedSequence], batch_size: usize) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in masked.chunks(batch_size.max(1)) {
        let inputs: Vec<EncodedPair> = chunk.iter().map(|m| m.input.clone()).collect();
        let batch = Batch::from_pairs(&inputs)?;
        let logits = encoder::predict_masked(config, weights, &batch)?;
        let v = config.vocab_size;
        for (bi, m) in chunk.iter().enumerate() {
            for &(pos, original, _) in &m.targets {
                let row = &logits.data()[(bi * batch.seq_len + pos) * v..(bi * batch.seq_len + pos + 1) * v];
                let best = row.iter().enumerate().fold(0, |b, (i, &x)| if x > row[b] { i } else { b });
                correct += usize::from(best == original as usize);
                total += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Accuracy of always predicting the most frequent non-special token of
/// `train` at the masked positions of `masked`.
pub fn majority_token_baseline(train: &[EncodedPair], masked: &[MaskedSequence]) -> f64 {
    let mut counts = alloc::collections::BTreeMap::new();
    for p in train {
        for (&t, &m) in p.token_ids.iter().zip(&p.attention_mask) {
            if m == 1 && t as usize >= NUM_SPECIALS {
                *counts.entry(t).or_insert(0usize) += 1;
            }
        }
    }
    let Some(top) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&t, _)| t) else {
        return 0.0;
    };
    let (hit, total) = masked
        .iter()
        .flat_map(|m| &m.targets)
        .fold((0usize, 0usize), |(h, n), &(_, orig, _)| (h + usize::from(orig == top), n + 1));
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn stage_record(ckpt: &Checkpoint, stage: &Stage, epochs_run: usize, best: Option<(f64, usize)>, data_fingerprint: u64) -> StageRecord {
    StageRecord {
        name: stage.name.clone(),
        objective: String::from(stage.objective.as_str()),
        epochs_run,
        best_epoch: best.map(|b| b.1),
        best_metric: best.map(|b| b.0),
        head_policy: (stage.objective == Objective::PairClassification).then_some(stage.head_policy),
        data_fingerprint,
        config_fingerprint: stage.config_fingerprint(&ckpt.config),
    }
}

/// Everything a stage needs besides the checkpoint.
pub struct StageData<'a> {
    pub train: &'a [EncodedPair],
    pub validation: &'a [EncodedPair],
}

impl StageData<'_> {
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(fingerprint_pairs(self.train)).write_u64(fingerprint_pairs(self.validation));
        h.finish()
    }
}

/// Trains one stage and returns the checkpoint with the best validation
/// score, its provenance extended by one record. `on_event` receives one
/// [`EpochEvent`] per evaluation.
pub fn train_stage(
    ckpt: Checkpoint,
    stage: &Stage,
    data: &StageData<'_>,
    on_event: &mut dyn FnMut(&EpochEvent),
) -> Result<Checkpoint, TrainError> {
    stage.config.validate()?;
    ckpt.config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainSet { stage: stage.name.clone() });
    }
    if data.validation.is_empty() {
        return Err(TrainError::EmptyValidationSet { stage: stage.name.clone() });
    }
    if stage.objective == Objective::PairClassification {
        if let Some(index) = data.train.iter().chain(data.validation).position(|p| p.label.is_none()) {
            return Err(TrainError::Unlabeled { stage: stage.name.clone(), index });
        }
    }
    let data_fp = data.fingerprint();
    let mut ckpt = ckpt;
    if stage.config.max_epochs == 0 {
        let rec = stage_record(&ckpt, stage, 0, None, data_fp);
        ckpt.provenance.push(rec);
        return Ok(ckpt);
    }

    let cfg = &stage.config;
    let config = ckpt.config.clone();
    let mut weights = ckpt.weights.clone();
    if stage.objective == Objective::PairClassification && stage.head_policy == HeadPolicy::Reinit {
        reinit_pair_head(&config, &mut weights, derive_seed(cfg.seed, HEAD_STREAM));
    }
    let mut shuffle_rng = seeded_rng(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut dropout_rng = seeded_rng(derive_seed(cfg.seed, DROPOUT_STREAM));
    let mut mask_rng = seeded_rng(derive_seed(cfg.seed, MASK_STREAM));
    let val_masked: Vec<MaskedSequence> = if stage.objective == Objective::MaskedToken {
        let mut r = seeded_rng(derive_seed(cfg.seed, VALIDATION_MASK_STREAM));
        data.validation.iter().map(|p| mask_tokens(p, config.vocab_size, cfg.mask_prob, &mut r)).collect()
    } else {
        Vec::new()
    };
    let validate = |w: &EncoderWeights| -> Result<f64, TrainError> {
        match stage.objective {
            Objective::PairClassification => pair_accuracy(&config, w, data.validation, cfg.batch_size.max(32)),
            Objective::MaskedToken => masked_token_accuracy(&config, w, &val_masked, cfg.batch_size.max(32)),
        }
    };

    let mut adam = AdamState::new(weights.refs());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_weights = weights.clone();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let mut stop = false;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in batches.iter().enumerate() {
            step += 1;
            let loss = match stage.objective {
                Objective::PairClassification => {
                    let pairs: Vec<EncodedPair> = idx.iter().map(|&i| data.train[i].clone()).collect();
                    let batch = Batch::from_pairs(&pairs)?;
                    train_step(&mut weights, &mut adam, cfg.learning_rate, &mut dropout_rng, |tape, p, mode| {
                        encoder::pair_loss_on_tape(tape, &config, p, &batch, mode)
                    })?
                }
                Objective::MaskedToken => {
                    let masked: Vec<MaskedSequence> =
                        idx.iter().map(|&i| mask_tokens(&data.train[i], config.vocab_size, cfg.mask_prob, &mut mask_rng)).collect();
                    let inputs: Vec<EncodedPair> = masked.iter().map(|m| m.input.clone()).collect();
                    let batch = Batch::from_pairs(&inputs)?;
                    let targets: Vec<(usize, usize)> = masked
                        .iter()
                        .enumerate()
                        .flat_map(|(b, m)| m.targets.iter().map(move |&(pos, orig, _)| (b * batch.seq_len + pos, orig as usize)))
                        .collect();
                    if targets.is_empty() {
                        continue;
                    }
                    train_step(&mut weights, &mut adam, cfg.learning_rate, &mut dropout_rng, |tape, p, mode| {
                        encoder::mlm_loss_on_tape(tape, &config, p, &batch, &targets, mode)
                    })?
                }
            };
            if !loss.is_finite() || !weights.refs().iter().all(|t| t.is_finite()) {
                return Err(TrainError::Diverged { stage: stage.name.clone(), epoch, step });
            }
            loss_sum += loss;
            loss_n += 1;
            let last = bi + 1 == batches.len();
            if last || cfg.eval_every.is_some_and(|n| step % n == 0) {
                let acc = validate(&weights)?;
                on_event(&EpochEvent { stage: stage.name.clone(), epoch, train_loss: loss_sum / loss_n as f64, val_acc: acc });
                match stopper.observe(acc, epoch) {
                    StopDecision::Improved => best_weights = weights.clone(),
                    StopDecision::Continue => {}
                    StopDecision::Stop => stop = true,
                }
            }
            if stop {
                epochs_run = epoch;
                break 'epochs;
            }
        }
        epochs_run = epoch;
    }

    let rec = stage_record(&ckpt, stage, epochs_run, stopper.best(), data_fp);
    ckpt.weights = best_weights;
    ckpt.provenance.push(rec);
    Ok(ckpt)
}

/// Forward in training mode, backward, one Adam update. Returns the loss.
fn train_step<F>(
    weights: &mut EncoderWeights,
    adam: &mut AdamState,
    lr: f64,
    dropout_rng: &mut SeedRng,
    loss_fn: F,
) -> Result<f64, TrainError>
where
    F: FnOnce(&mut Tape, &encoder::EncoderParams<crate::autograd::Var>, &mut Mode<'_>) -> Result<crate::autograd::Var, EncoderError>,
{
    let mut tape = Tape::new();
    let bound = bind(&mut tape, weights);
    let root = loss_fn(&mut tape, &bound, &mut Mode::Training(dropout_rng))?;
    let loss = tape.value(root).item().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = tape.backward(root)?;
    let grad_refs: Vec<Option<&Tensor>> = bound.refs().into_iter().map(|&v| grads.get(v)).collect();
    let mut params = weights.refs_mut();
    adam.step(&mut params, &grad_refs, lr)?;
    Ok(loss)
}

/// Masked-token pretraining over single-segment sequences.
pub fn mlm_pretrain(
    ckpt: Checkpoint,
    name: &str,
    train: &[EncodedPair],
    validation: &[EncodedPair],
    config: TrainConfig,
    on_event: &mut dyn FnMut(&EpochEvent),
) -> Result<Checkpoint, TrainError> {
    let stage = Stage { name: String::from(name), objective: Objective::MaskedToken, config, head_policy: HeadPolicy::Reuse };
    train_stage(ckpt, &stage, &StageData { train, validation }, on_event)
}
