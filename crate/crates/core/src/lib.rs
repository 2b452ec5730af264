//! Allocation-only core of the `domainsim` transfer-learning lab.
//!
//! Everything here is pure computation over in-memory values: word-level
//! tokenization, a small reverse-mode autograd engine, a BERT-style encoder
//! with pair-classification and masked-token heads, Adam, the staged
//! fine-tuning loop, dataset construction, and the split/ensemble
//! evaluation protocol. File formats, the CLI and the probe HTTP service
//! live in the `domainsim` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod datasets;
pub mod encoder;
pub mod evaluation;
pub mod fingerprint;
pub mod optim;
pub mod probe;
pub mod tokenizer;
pub mod training;

/// Deterministic RNG used everywhere a seed is accepted.
pub type SeedRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeedRng {
    use rand::SeedableRng;
    SeedRng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
