//! BERT-style mini-transformer with pair-classification and masked-token
//! heads.
//!
//! Token, position and segment embeddings are summed and normalized, then
//! pass through post-norm self-attention blocks. The pair head reads a
//! tanh-pooled `[CLS]` state; the masked-token head projects every position
//! onto the vocabulary.

mod params;

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::fingerprint::Fnv64;
use crate::tokenizer::{EncodedPair, CLS_ID};
use crate::SeedRng;

pub use params::{layout, EncoderParams, LayerParams, ParamKind};

/// Learnable buffers of an encoder.
pub type EncoderWeights = EncoderParams<Tensor>;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(&'static str),
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has unlabeled pairs")]
    MissingLabels,
    #[error("buffer {name}: expected shape {expected:?}, found {found:?}")]
    ShapeAudit { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("expected {expected} buffers, found {found}")]
    BufferCount { expected: usize, found: usize },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub segment_types: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Default desk-scale configuration: 2 layers, 4 heads, hidden 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self { layers: 2, heads: 4, hidden: 64, ff_dim: 256, vocab_size, max_positions: 200, segment_types: 2, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(EncoderError::InvalidConfig("hidden must be a positive multiple of heads"));
        }
        if self.ff_dim == 0 {
            return Err(EncoderError::InvalidConfig("ff_dim must be positive"));
        }
        if self.vocab_size < crate::tokenizer::NUM_SPECIALS {
            return Err(EncoderError::InvalidConfig("vocab_size must cover the special tokens"));
        }
        if self.max_positions < 5 {
            return Err(EncoderError::InvalidConfig("max_positions must be at least 5"));
        }
        if self.segment_types != 2 {
            return Err(EncoderError::InvalidConfig("segment_types must be 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::InvalidConfig("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for v in [self.layers, self.heads, self.hidden, self.ff_dim, self.vocab_size, self.max_positions, self.segment_types] {
            h.write_u64(v as u64);
        }
        h.write_u64(self.dropout.to_bits());
        h.finish()
    }
}

/// Samples `N(0, std)` truncated to two standard deviations.
fn truncated_normal(rng: &mut SeedRng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let z = libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_tensor(shape: &[usize], kind: ParamKind, rng: &mut SeedRng) -> Tensor {
    match kind {
        ParamKind::Bias => Tensor::zeros(shape),
        ParamKind::NormGain => Tensor::filled(shape, 1.0),
        ParamKind::Weight => {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect();
            Tensor::from_vec(shape.to_vec(), data).expect("shape matches")
        }
    }
}

/// Fresh weights: truncated-normal matrices, zero biases, unit norm gains.
pub fn init_weights(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights, EncoderError> {
    config.validate()?;
    let mut rng = crate::seeded_rng(seed);
    let items = layout(config).into_iter().map(|(_, shape, kind)| init_tensor(&shape, kind, &mut rng)).collect();
    Ok(EncoderParams::from_ordered(config.layers, items).expect("layout matches"))
}

/// Re-initializes the pair-classification head only.
pub fn reinit_pair_head(config: &EncoderConfig, weights: &mut EncoderWeights, seed: u64) {
    let mut rng = crate::seeded_rng(seed);
    weights.pair_head_w = init_tensor(&[config.hidden, 2], ParamKind::Weight, &mut rng);
    weights.pair_head_b = Tensor::zeros(&[2]);
}

/// Verifies every buffer's shape against the config.
pub fn shape_audit(config: &EncoderConfig, weights: &EncoderWeights) -> Result<(), EncoderError> {
    config.validate()?;
    let expected = layout(config);
    let refs = weights.refs();
    if refs.len() != expected.len() {
        return Err(EncoderError::BufferCount { expected: expected.len(), found: refs.len() });
    }
    for ((name, shape, _), t) in expected.into_iter().zip(refs) {
        if t.shape() != shape.as_slice() {
            return Err(EncoderError::ShapeAudit { name, expected: shape, found: t.shape().to_vec() });
        }
    }
    Ok(())
}

/// A padded batch of encoded pairs, flattened row-major as `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// True on content positions, false on padding.
    pub mask: Vec<bool>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    /// Pads every pair to the longest sequence in the slice.
    pub fn from_pairs(pairs: &[EncodedPair]) -> Result<Self, EncoderError> {
        Self::padded(pairs, 0)
    }

    /// Pads to at least `min_len` positions.
    pub fn padded(pairs: &[EncodedPair], min_len: usize) -> Result<Self, EncoderError> {
        if pairs.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let seq_len = pairs.iter().map(EncodedPair::len).max().unwrap_or(0).max(min_len);
        let mut b = Batch {
            size: pairs.len(),
            seq_len,
            token_ids: Vec::with_capacity(pairs.len() * seq_len),
            segment_ids: Vec::with_capacity(pairs.len() * seq_len),
            mask: Vec::with_capacity(pairs.len() * seq_len),
            labels: pairs.iter().map(|p| p.label.map(usize::from)).collect(),
        };
        for p in pairs {
            for i in 0..seq_len {
                b.token_ids.push(p.token_ids.get(i).map_or(0, |&t| t as usize));
                b.segment_ids.push(p.segment_ids.get(i).map_or(0, |&s| usize::from(s)));
                b.mask.push(p.attention_mask.get(i).is_some_and(|&m| m == 1));
            }
        }
        Ok(b)
    }

    fn validate(&self, config: &EncoderConfig) -> Result<(), EncoderError> {
        if self.size == 0 {
            return Err(EncoderError::EmptyBatch);
        }
        if self.seq_len > config.max_positions {
            return Err(EncoderError::SequenceTooLong { len: self.seq_len, max: config.max_positions });
        }
        if let Some(&id) = self.token_ids.iter().find(|&&t| t >= config.vocab_size) {
            return Err(EncoderError::TokenOutOfRange { id: id as u32, vocab: config.vocab_size });
        }
        Ok(())
    }
}

/// Training mode carries the dropout RNG; inference disables dropout.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut SeedRng),
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var, AutogradError> {
        match self {
            Mode::Inference => Ok(x),
            Mode::Training(rng) => tape.dropout(x, p, *rng),
        }
    }
}

/// Output of a forward pass recorded on a tape.
pub struct Encoded {
    /// Final hidden states, `[batch * len, hidden]`.
    pub hidden: Var,
    /// Attention probabilities per layer, `[batch * heads, len, len]`.
    pub attention: Vec<Var>,
}

/// Records every weight as a trainable leaf.
pub fn bind(tape: &mut Tape, weights: &EncoderWeights) -> EncoderParams<Var> {
    weights.map(|t| tape.param(t.clone()))
}

/// Records weights as constants (no gradients).
pub fn bind_frozen(tape: &mut Tape, weights: &EncoderWeights) -> EncoderParams<Var> {
    weights.map(|t| tape.constant(t.clone()))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutogradError> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Runs the embedding stack and every transformer block.
pub fn encode_on_tape(
    tape: &mut Tape,
    config: &EncoderConfig,
    p: &EncoderParams<Var>,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<Encoded, EncoderError> {
    batch.validate(config)?;
    let (b, l, h, heads) = (batch.size, batch.seq_len, config.hidden, config.heads);
    let dh = config.head_dim();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();

    let tok = tape.gather_rows(p.token_embedding, &batch.token_ids)?;
    let pos = tape.gather_rows(p.position_embedding, &positions)?;
    let seg = tape.gather_rows(p.segment_embedding, &batch.segment_ids)?;
    let x = tape.add(tok, pos)?;
    let x = tape.add(x, seg)?;
    let x = tape.layer_norm(x, p.embed_norm_gain, p.embed_norm_bias, LAYER_NORM_EPS)?;
    let mut x = mode.dropout(tape, x, config.dropout)?;

    // true where the key position is padding
    let mut key_mask = Vec::with_capacity(b * heads * l * l);
    for bi in 0..b {
        let row_mask = &batch.mask[bi * l..(bi + 1) * l];
        for _ in 0..heads * l {
            key_mask.extend(row_mask.iter().map(|&m| !m));
        }
    }
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut attention = Vec::with_capacity(config.layers);

    for lp in &p.layers {
        let split = |tape: &mut Tape, v: Var| -> Result<Var, AutogradError> {
            let v = tape.reshape(v, &[b, l, heads, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[b * heads, l, dh])
        };
        let q = linear(tape, x, lp.query_w, lp.query_b)?;
        let k = linear(tape, x, lp.key_w, lp.key_b)?;
        let v = linear(tape, x, lp.value_w, lp.value_b)?;
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.masked_fill(scores, &key_mask)?;
        let probs = tape.softmax(scores, 2)?;
        attention.push(probs);
        let probs = mode.dropout(tape, probs, config.dropout)?;
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[b, heads, l, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * l, h])?;
        let attn_out = linear(tape, ctx, lp.output_w, lp.output_b)?;
        let attn_out = mode.dropout(tape, attn_out, config.dropout)?;
        let res = tape.add(x, attn_out)?;
        x = tape.layer_norm(res, lp.attn_norm_gain, lp.attn_norm_bias, LAYER_NORM_EPS)?;

        let ff = linear(tape, x, lp.ff_in_w, lp.ff_in_b)?;
        let ff = tape.gelu(ff)?;
        let ff = linear(tape, ff, lp.ff_out_w, lp.ff_out_b)?;
        let ff = mode.dropout(tape, ff, config.dropout)?;
        let res = tape.add(x, ff)?;
        x = tape.layer_norm(res, lp.ff_norm_gain, lp.ff_norm_bias, LAYER_NORM_EPS)?;
    }
    Ok(Encoded { hidden: x, attention })
}

/// Pair logits `[batch, 2]` from the tanh-pooled `[CLS]` state.
pub fn pair_logits_on_tape(
    tape: &mut Tape,
    config: &EncoderConfig,
    p: &EncoderParams<Var>,
    batch: &Batch,
    encoded: &Encoded,
    mode: &mut Mode<'_>,
) -> Result<Var, EncoderError> {
    let cls_rows: Vec<usize> = (0..batch.size).map(|i| i * batch.seq_len).collect();
    debug_assert!(cls_rows.iter().all(|&r| batch.token_ids[r] == CLS_ID as usize));
    let cls = tape.gather_rows(encoded.hidden, &cls_rows)?;
    let pooled = linear(tape, cls, p.pooler_w, p.pooler_b)?;
    let pooled = tape.tanh(pooled)?;
    let pooled = mode.dropout(tape, pooled, config.dropout)?;
    Ok(linear(tape, pooled, p.pair_head_w, p.pair_head_b)?)
}

/// Vocabulary logits for the selected flat positions (`batch_index * len +
/// position`), `[rows.len(), vocab]`.
pub fn mlm_logits_on_tape(tape: &mut Tape, p: &EncoderParams<Var>, encoded: &Encoded, rows: &[usize]) -> Result<Var, EncoderError> {
    let sel = tape.gather_rows(encoded.hidden, rows)?;
    Ok(linear(tape, sel, p.mlm_head_w, p.mlm_head_b)?)
}

/// Mean cross-entropy of the pair head on a labeled batch.
pub fn pair_loss_on_tape(
    tape: &mut Tape,
    config: &EncoderConfig,
    p: &EncoderParams<Var>,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<Var, EncoderError> {
    let labels = batch.labels.as_ref().ok_or(EncoderError::MissingLabels)?;
    let encoded = encode_on_tape(tape, config, p, batch, mode)?;
    let logits = pair_logits_on_tape(tape, config, p, batch, &encoded, mode)?;
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Masked-token loss over `targets` of `(flat position, original id)`.
/// Returns a constant zero when there are no targets.
pub fn mlm_loss_on_tape(
    tape: &mut Tape,
    config: &EncoderConfig,
    p: &EncoderParams<Var>,
    batch: &Batch,
    targets: &[(usize, usize)],
    mode: &mut Mode<'_>,
) -> Result<Var, EncoderError> {
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let encoded = encode_on_tape(tape, config, p, batch, mode)?;
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let labels: Vec<usize> = targets.iter().map(|t| t.1).collect();
    let logits = mlm_logits_on_tape(tape, p, &encoded, &rows)?;
    Ok(tape.cross_entropy(logits, &labels)?)
}

/// Final hidden states `[batch, len, hidden]` in inference mode.
pub fn encode(config: &EncoderConfig, weights: &EncoderWeights, batch: &Batch) -> Result<Tensor, EncoderError> {
    let mut tape = Tape::new();
    let p = bind_frozen(&mut tape, weights);
    let enc = encode_on_tape(&mut tape, config, &p, batch, &mut Mode::Inference)?;
    let data = tape.value(enc.hidden).data().to_vec();
    Ok(Tensor::from_vec(alloc::vec![batch.size, batch.seq_len, config.hidden], data)?)
}

/// Pair logits `[batch, 2]` in inference mode.
pub fn classify_pair(config: &EncoderConfig, weights: &EncoderWeights, batch: &Batch) -> Result<Tensor, EncoderError> {
    let mut tape = Tape::new();
    let p = bind_frozen(&mut tape, weights);
    let enc = encode_on_tape(&mut tape, config, &p, batch, &mut Mode::Inference)?;
    let logits = pair_logits_on_tape(&mut tape, config, &p, batch, &enc, &mut Mode::Inference)?;
    Ok(tape.value(logits).clone())
}

/// Vocabulary logits `[batch, len, vocab]` at every position, inference mode.
pub fn predict_masked(config: &EncoderConfig, weights: &EncoderWeights, batch: &Batch) -> Result<Tensor, EncoderError> {
    let mut tape = Tape::new();
    let p = bind_frozen(&mut tape, weights);
    let enc = encode_on_tape(&mut tape, config, &p, batch, &mut Mode::Inference)?;
    let rows: Vec<usize> = (0..batch.size * batch.seq_len).collect();
    let logits = mlm_logits_on_tape(&mut tape, &p, &enc, &rows)?;
    let data = tape.value(logits).data().to_vec();
    Ok(Tensor::from_vec(alloc::vec![batch.size, batch.seq_len, config.vocab_size], data)?)
}

/// Attention probabilities per layer in inference mode, each
/// `[batch * heads, len, len]`.
pub fn attention_maps(config: &EncoderConfig, weights: &EncoderWeights, batch: &Batch) -> Result<Vec<Tensor>, EncoderError> {
    let mut tape = Tape::new();
    let p = bind_frozen(&mut tape, weights);
    let enc = encode_on_tape(&mut tape, config, &p, batch, &mut Mode::Inference)?;
    Ok(enc.attention.iter().map(|&a| tape.value(a).clone()).collect())
}

/// Pair logits for any number of pairs, batched in order.
pub fn pair_logits(config: &EncoderConfig, weights: &EncoderWeights, pairs: &[EncodedPair], batch_size: usize) -> Result<Vec<[f64; 2]>, EncoderError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let logits = classify_pair(config, weights, &Batch::from_pairs(chunk)?)?;
        out.extend(logits.data().chunks(2).map(|r| [r[0], r[1]]));
    }
    Ok(out)
}

/// Label from two logits; a tie goes to 0.
pub fn argmax_label(logits: [f64; 2]) -> u8 {
    u8::from(logits[1] > logits[0])
}

/// Probability of label 1 under the softmax of two logits.
pub fn positive_probability(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + libm::exp(logits[0] - logits[1]))
}

/// Whether the pair head of a continuing stage keeps its trained weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadPolicy {
    #[default]
    Reuse,
    Reinit,
}

/// One completed training stage in a checkpoint's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub objective: String,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub head_policy: Option<HeadPolicy>,
    pub data_fingerprint: u64,
    pub config_fingerprint: u64,
}

/// Weights plus the configuration and stage history that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub weights: EncoderWeights,
    pub provenance: Vec<StageRecord>,
    pub seed: u64,
    pub vocab_fingerprint: u64,
}

impl Checkpoint {
    /// Freshly initialized checkpoint with empty provenance.
    pub fn init(config: EncoderConfig, seed: u64, vocab_fingerprint: u64) -> Result<Self, EncoderError> {
        let weights = init_weights(&config, seed)?;
        Ok(Self { config, weights, provenance: Vec::new(), seed, vocab_fingerprint })
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.provenance.iter().map(|s| s.name.as_str()).collect()
    }

    /// Hash over the whole stage chain.
    pub fn provenance_hash(&self) -> u64 {
        provenance_hash(&self.provenance)
    }

    pub fn classify_pair(&self, batch: &Batch) -> Result<Tensor, EncoderError> {
        classify_pair(&self.config, &self.weights, batch)
    }
}

pub fn provenance_hash(records: &[StageRecord]) -> u64 {
    let mut h = Fnv64::new();
    for r in records {
        h.write_str(&r.name).write_str(&r.objective).write_u64(r.epochs_run as u64);
        h.write_u64(r.best_epoch.map_or(u64::MAX, |e| e as u64));
        h.write_u64(r.best_metric.map_or(u64::MAX, f64::to_bits));
        h.write_u64(match r.head_policy {
            None => 0,
            Some(HeadPolicy::Reuse) => 1,
            Some(HeadPolicy::Reinit) => 2,
        });
        h.write_u64(r.data_fingerprint).write_u64(r.config_fingerprint);
    }
    h.finish()
}
