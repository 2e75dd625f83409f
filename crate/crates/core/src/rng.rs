//! Per-purpose deterministic RNG streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream derived from
//! the master seed and a purpose tag, so e.g. consuming noise draws never
//! perturbs batch sampling.

use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Independent stream purposes hashed into the seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init,
    Sampling,
    Noise,
    Split,
    Synth,
    Mock,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Sampling => "sampling",
            Stream::Noise => "noise",
            Stream::Split => "split",
            Stream::Synth => "synth",
            Stream::Mock => "mock",
        }
    }
}

/// Derive the RNG for `stream` from the master seed.
pub fn stream_rng(master_seed: u64, stream: Stream) -> ChaCha20Rng {
    seeded_rng(master_seed, stream.tag())
}

/// Derive an RNG from a seed and an arbitrary tag (e.g. a per-entity salt).
pub fn seeded_rng(master_seed: u64, tag: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}
