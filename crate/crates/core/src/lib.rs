//! Deterministic simulator for federated updating of a graph-based
//! multimodal adapter aligned to a semantic knowledge base (SKB).

pub mod adapter;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod labeling;
pub mod math;
pub mod model;
pub mod skb;
pub mod trainer;

pub use error::{Error, Result};

/// Derives an independent stream seed from a master seed and a path of
/// integers (client, round, epoch, ...). SplitMix64 mixing.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}
