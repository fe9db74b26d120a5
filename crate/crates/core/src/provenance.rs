//! Provenance strings stamped into every artifact.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// `voicepd <version>`.
pub fn producer() -> String {
    format!("voicepd {}", env!("CARGO_PKG_VERSION"))
}

/// Hex SHA-256 of a configuration's JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configuration types serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// `voicepd <version> seed=<seed> config=<sha256>`.
pub fn stamp<T: Serialize>(seed: u64, config: &T) -> String {
    format!("{} seed={seed} config={}", producer(), config_hash(config))
}
