//! Checkpoint files.
//!
//! Layout: the magic `DSIMCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header of that many bytes, then
//! every tensor's values as little-endian `f64` in the header's order. Each
//! manifest entry carries its byte offset from the start of the tensor data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use domainsim_core::autograd::Tensor;
use domainsim_core::encoder::{layout, Checkpoint, EncoderConfig, EncoderParams, StageRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DSIMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: format version {found} is not supported (expected {FORMAT_VERSION})")]
    UnsupportedVersion { path: PathBuf, found: u32 },
    #[error("{path}: truncated: needed {needed} bytes, file has {available}")]
    Truncated { path: PathBuf, needed: u64, available: u64 },
    #[error("{path}: bad header: {source}")]
    Header { path: PathBuf, source: serde_json::Error },
    #[error("{path}: tensor {index} is {found}, expected {expected} for this config")]
    Layout { path: PathBuf, index: usize, expected: String, found: String },
    #[error("{path}: invalid encoder config: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {extra} unexpected trailing bytes")]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("{path}: non-finite value in tensor {name}")]
    NonFinite { path: PathBuf, name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    seed: u64,
    vocab_fingerprint: u64,
    provenance: Vec<StageRecord>,
    tensors: Vec<TensorEntry>,
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let names = layout(&ckpt.config);
    let tensors: Vec<&Tensor> = ckpt.weights.refs();
    let header = Header {
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        vocab_fingerprint: ckpt.vocab_fingerprint,
        provenance: ckpt.provenance.clone(),
        tensors: names
            .iter()
            .zip(&tensors)
            .scan(0u64, |offset, ((n, _, _), t)| {
                let entry = TensorEntry { name: n.clone(), shape: t.shape().to_vec(), offset: *offset };
                *offset += 8 * t.numel() as u64;
                Some(entry)
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let values: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: u64, path: &Path) -> Result<&'a [u8], CheckpointError> {
    let end = (*at as u64).checked_add(n).filter(|&e| e <= bytes.len() as u64);
    let Some(end) = end else {
        return Err(CheckpointError::Truncated { path: path.to_path_buf(), needed: *at as u64 + n, available: bytes.len() as u64 });
    };
    let s = &bytes[*at..end as usize];
    *at = end as usize;
    Ok(s)
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint, CheckpointError> {
    let p = || path.to_path_buf();
    let mut at = 0;
    if take(bytes, &mut at, 8, path)? != MAGIC {
        return Err(CheckpointError::BadMagic { path: p() });
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, path)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { path: p(), found: version });
    }
    let header_len = u64::from_le_bytes(take(bytes, &mut at, 8, path)?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(take(bytes, &mut at, header_len, path)?).map_err(|source| CheckpointError::Header { path: p(), source })?;
    header.config.validate().map_err(|e| CheckpointError::Config { path: p(), message: e.to_string() })?;

    let expected = layout(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(CheckpointError::Layout {
            path: p(),
            index: expected.len().min(header.tensors.len()),
            expected: format!("{} tensors", expected.len()),
            found: format!("{} tensors", header.tensors.len()),
        });
    }
    let data_start = at as u64;
    let mut tensors = Vec::with_capacity(expected.len());
    for (index, ((name, shape, _), entry)) in expected.iter().zip(&header.tensors).enumerate() {
        if entry.offset != at as u64 - data_start {
            return Err(CheckpointError::Layout {
                path: p(),
                index,
                expected: format!("{name} at byte {}", at as u64 - data_start),
                found: format!("{} at byte {}", entry.name, entry.offset),
            });
        }
        if name != &entry.name || shape != &entry.shape {
            return Err(CheckpointError::Layout {
                path: p(),
                index,
                expected: format!("{name} {shape:?}"),
                found: format!("{} {:?}", entry.name, entry.shape),
            });
        }
        let n: usize = shape.iter().product();
        let raw = take(bytes, &mut at, 8 * n as u64, path)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite { path: p(), name: name.clone() });
        }
        tensors.push(Tensor::from_vec(shape.clone(), data).expect("shape product matches"));
    }
    if at != bytes.len() {
        return Err(CheckpointError::TrailingBytes { path: p(), extra: (bytes.len() - at) as u64 });
    }
    let weights = EncoderParams::from_ordered(header.config.layers, tensors).expect("layout length checked");
    Ok(Checkpoint { config: header.config, weights, provenance: header.provenance, seed: header.seed, vocab_fingerprint: header.vocab_fingerprint })
}

/// Writes via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&to_bytes(ckpt)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use domainsim_core::encoder::HeadPolicy;

    fn sample() -> Checkpoint {
        let config = EncoderConfig { layers: 2, heads: 2, hidden: 8, ff_dim: 16, vocab_size: 30, max_positions: 16, segment_types: 2, dropout: 0.1 };
        let mut c = Checkpoint::init(config, 9, 1234).unwrap();
        c.provenance.push(StageRecord {
            name: "final".into(),
            objective: "pair-classification".into(),
            epochs_run: 3,
            best_epoch: Some(2),
            best_metric: Some(0.75),
            head_policy: Some(HeadPolicy::Reuse),
            data_fingerprint: 1,
            config_fingerprint: 2,
        });
        c
    }

    #[test]
    fn round_trip_is_exact_and_resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        save(&path, &c).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, c);
        let again = dir.path().join("b.ckpt");
        save(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert!(!dir.path().join("a.ckpt.tmp").exists());
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let p = Path::new("x.ckpt");
        let good = to_bytes(&sample());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, p), Err(CheckpointError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(from_bytes(&bad, p), Err(CheckpointError::UnsupportedVersion { found: 7, .. })));

        assert!(matches!(from_bytes(&good[..good.len() - 3], p), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(from_bytes(&good[..10], p), Err(CheckpointError::Truncated { .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(from_bytes(&bad, p), Err(CheckpointError::TrailingBytes { extra: 1, .. })));

        let mut bad = good.clone();
        bad[20] = b'!';
        assert!(matches!(from_bytes(&bad, p), Err(CheckpointError::Header { .. })));

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(from_bytes(&bad, p), Err(CheckpointError::NonFinite { .. })));

        // a header that disagrees with its own config
        let c = sample();
        let text = String::from_utf8(good[20..20 + u64::from_le_bytes(good[12..20].try_into().unwrap()) as usize].to_vec()).unwrap();
        let swapped = text.replacen("\"embeddings.token\"", "\"embeddings.tokem\"", 1);
        let mut bad = Vec::new();
        bad.extend_from_slice(MAGIC);
        bad.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bad.extend_from_slice(&(swapped.len() as u64).to_le_bytes());
        bad.extend_from_slice(swapped.as_bytes());
        bad.extend_from_slice(&good[20 + text.len()..]);
        assert!(matches!(from_bytes(&bad, p), Err(CheckpointError::Layout { index: 0, .. })), "{:?}", c.config);
    }

    #[test]
    fn manifest_offsets_locate_each_tensor() {
        let c = sample();
        let bytes = to_bytes(&c);
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
        let data = &bytes[20 + header_len..];
        for (entry, t) in header["tensors"].as_array().unwrap().iter().zip(c.weights.refs()) {
            let at = entry["offset"].as_u64().unwrap() as usize;
            let first = f64::from_le_bytes(data[at..at + 8].try_into().unwrap());
            assert_eq!(first, t.data()[0], "{}", entry["name"]);
        }
        let last = header["tensors"].as_array().unwrap().last().unwrap();
        let n: u64 = last["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
        assert_eq!(last["offset"].as_u64().unwrap() + 8 * n, data.len() as u64);

        // a shifted offset is refused
        let text = std::str::from_utf8(&bytes[20..20 + header_len]).unwrap();
        let moved = text.replacen("\"offset\":0", "\"offset\":8", 1);
        assert_eq!(moved.len(), text.len());
        let mut bad = bytes.clone();
        bad[20..20 + header_len].copy_from_slice(moved.as_bytes());
        assert!(matches!(from_bytes(&bad, Path::new("x")), Err(CheckpointError::Layout { index: 0, .. })));
    }
}
