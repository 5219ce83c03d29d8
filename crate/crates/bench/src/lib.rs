//! Shared fixtures for the benchmarks.

use rins_core::{ModelDims, RecursionPolicy, RecursiveModel, Signature};

/// A small desk-scale configuration.
pub fn dims(seq_len: usize) -> ModelDims {
    ModelDims {
        d_model: 64,
        n_heads: 4,
        mlp_dim: 256,
        vocab: 65,
        seq_len,
        total_layers: 4,
    }
}

pub fn rins_model(rounds: usize, kv_share: bool, seq_len: usize) -> RecursiveModel {
    let sig = Signature::rins(rounds);
    let policy = RecursionPolicy {
        kv_share,
        ..RecursionPolicy::for_signature(&sig)
    };
    RecursiveModel::new(&sig, dims(seq_len), policy, 7).expect("valid bench model")
}

/// Deterministic token sequence below `vocab`.
pub fn tokens(len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|i| ((i * 31 + 7) % vocab) as u32).collect()
}
