//! Word-level tokenizer and sentence-pair encoding.
//!
//! Text is lowercased and split on whitespace; every punctuation character
//! becomes its own token. Ids are assigned specials first, then corpus
//! tokens in first-occurrence order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::Fnv64;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

/// Number of reserved ids at the front of every vocabulary.
pub const NUM_SPECIALS: usize = 4;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

/// Default maximum encoded pair length.
pub const DEFAULT_MAX_LEN: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("min_count must be at least 1")]
    ZeroMinCount,
    #[error("{0} segment is empty after tokenization")]
    EmptySegment(&'static str),
    #[error("max_len {0} is too small; a pair needs at least 5 positions")]
    MaxLenTooSmall(usize),
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("token id {id} is out of range for a vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary line {line}: expected special token {expected}, found {found:?}")]
    BadSpecial { line: usize, expected: &'static str, found: String },
    #[error("vocabulary line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
}

/// Splits text into lowercase word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(core::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Immutable token <-> id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary keeping every token seen at least `min_count` times.
    pub fn build<S: AsRef<str>>(corpus_lines: &[S], min_count: usize) -> Result<Self, TokenizerError> {
        if corpus_lines.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        if min_count == 0 {
            return Err(TokenizerError::ZeroMinCount);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for line in corpus_lines {
            for tok in tokenize(line.as_ref()) {
                let c = counts.entry(tok).or_insert_with_key(|k| {
                    order.push(k.clone());
                    0
                });
                *c += 1;
            }
        }
        let kept = order.into_iter().filter(|t| counts[t] >= min_count && !SPECIAL_TOKENS.contains(&t.as_str()));
        Ok(Self::from_corpus_tokens(kept))
    }

    fn from_corpus_tokens(tokens: impl Iterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { token_to_id, id_to_token }
    }

    /// Reconstructs a vocabulary from its id-ordered token list, validating
    /// the special-token prefix and uniqueness.
    pub fn from_token_list<S: AsRef<str>>(tokens: &[S]) -> Result<Self, TokenizerError> {
        for (line, expected) in SPECIAL_TOKENS.iter().enumerate() {
            let found = tokens.get(line).map(|t| t.as_ref()).unwrap_or("");
            if found != *expected {
                return Err(TokenizerError::BadSpecial { line, expected, found: found.to_string() });
            }
        }
        let mut token_to_id = BTreeMap::new();
        let mut id_to_token = Vec::with_capacity(tokens.len());
        for (line, tok) in tokens.iter().enumerate() {
            let tok = tok.as_ref().to_string();
            if token_to_id.insert(tok.clone(), line as u32).is_some() {
                return Err(TokenizerError::DuplicateToken { line, token: tok });
            }
            id_to_token.push(tok);
        }
        Ok(Self { token_to_id, id_to_token })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Stable hash of the id-ordered token list.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for t in &self.id_to_token {
            h.write_str(t);
        }
        h.finish()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// Space-joins the tokens for `ids`.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.size() })?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }
}

/// A tokenized `[CLS] q1 [SEP] q2 [SEP]` sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub label: Option<u8>,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Appends PAD positions until the sequence has length `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.token_ids.len() < len {
            self.token_ids.push(PAD_ID);
            self.segment_ids.push(0);
            self.attention_mask.push(0);
        }
    }
}

fn check_label(label: Option<u8>) -> Result<(), TokenizerError> {
    match label {
        Some(l) if l > 1 => Err(TokenizerError::InvalidLabel(l)),
        _ => Ok(()),
    }
}

/// Encodes a sentence pair, trimming the longer segment from its tail until
/// the whole sequence fits in `max_len`.
pub fn encode_pair(
    vocab: &Vocabulary,
    q1: &str,
    q2: &str,
    max_len: usize,
    label: Option<u8>,
) -> Result<EncodedPair, TokenizerError> {
    if max_len < 5 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    check_label(label)?;
    let mut a = vocab.encode_text(q1);
    let mut b = vocab.encode_text(q2);
    if a.is_empty() {
        return Err(TokenizerError::EmptySegment("q1"));
    }
    if b.is_empty() {
        return Err(TokenizerError::EmptySegment("q2"));
    }
    while a.len() + b.len() + 3 > max_len {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    let len = a.len() + b.len() + 3;
    let mut token_ids = Vec::with_capacity(len);
    token_ids.push(CLS_ID);
    token_ids.extend_from_slice(&a);
    token_ids.push(SEP_ID);
    let first = token_ids.len();
    token_ids.extend_from_slice(&b);
    token_ids.push(SEP_ID);
    let mut segment_ids = alloc::vec![0u8; first];
    segment_ids.resize(len, 1);
    Ok(EncodedPair { token_ids, segment_ids, attention_mask: alloc::vec![1; len], label })
}

/// Encodes one sentence as `[CLS] s [SEP]`, used by masked-token pretraining.
pub fn encode_single(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<EncodedPair, TokenizerError> {
    if max_len < 3 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let mut a = vocab.encode_text(text);
    if a.is_empty() {
        return Err(TokenizerError::EmptySegment("text"));
    }
    a.truncate(max_len - 2);
    let mut token_ids = Vec::with_capacity(a.len() + 2);
    token_ids.push(CLS_ID);
    token_ids.extend_from_slice(&a);
    token_ids.push(SEP_ID);
    let len = token_ids.len();
    Ok(EncodedPair { token_ids, segment_ids: alloc::vec![0; len], attention_mask: alloc::vec![1; len], label: None })
}
