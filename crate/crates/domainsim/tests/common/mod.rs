#![allow(dead_code)]

use std::path::PathBuf;

use domainsim::experiment::GridConfig;
use domainsim_core::datasets::SyntheticSpec;

pub fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

/// The shipped world at a few hundred records.
pub fn small_spec() -> SyntheticSpec {
    let mut spec: SyntheticSpec = serde_json::from_str(&std::fs::read_to_string(assets().join("synthetic_spec.json")).unwrap()).unwrap();
    spec.sizes.qa_records = 150;
    spec.sizes.qq_pairs = 200;
    spec.sizes.final_pairs = 200;
    spec
}

/// A grid that trains in seconds: tiny encoder, one epoch per stage.
pub fn tiny_grid(conditions: &[&str], sizes: &[usize]) -> GridConfig {
    let json = serde_json::json!({
        "seed": 3,
        "synthetic_spec": small_spec(),
        "conditions": conditions,
        "sizes": sizes,
        "k": 5,
        "encoder": {"layers": 1, "heads": 2, "hidden": 8, "ff_dim": 16, "max_positions": 32, "dropout": 0.1},
        "intermediate": {"learning_rate": 0.001, "batch_size": 32, "max_len": 32, "max_epochs": 1, "patience": 1, "seed": 1},
        "final": {"learning_rate": 0.001, "batch_size": 16, "max_len": 32, "max_epochs": 2, "patience": 2, "seed": 2}
    });
    serde_json::from_value(json).unwrap()
}
