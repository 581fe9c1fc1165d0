//! Uncertainty quantification and decomposition for LLM-based rankers.

pub mod adaptive;
pub mod backends;
pub mod commands;
pub mod evaluation;
pub mod pipeline;
pub mod pl;
pub mod prompting;
pub mod rng;
pub mod uncertainty;

use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}
