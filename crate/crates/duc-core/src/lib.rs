//! Desk-scale laboratory for inducing, measuring, and mitigating repetitive
//! text generation in a small trainable transformer.
//!
//! The pipeline: build repetition corpora, score repetition with n-gram /
//! Self-BLEU / entropy metrics, train a toy decoder-only LM, train a sparse
//! autoencoder on its residual stream, attribute repetition to layers via
//! logit differences, scan SAE features by steering, and mitigate repetition
//! by deactivating the features found.

pub mod attribution;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod sae;
pub mod steering;
pub mod tinylm;
pub mod toydata;
pub mod vocab;

pub use error::{DucError, Result};

/// Token id over a [`vocab::Vocabulary`].
pub type TokenId = u32;
/// Sequence of token ids — the unit all metrics and models consume.
pub type TokenSeq = Vec<TokenId>;

/// Derive a child RNG seed from a base seed and a stream label.
///
/// Used everywhere a module needs an independent deterministic RNG stream
/// (per dataset cell, per scanned feature, per generation) so that parallel
/// or reordered evaluation can never change results.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
