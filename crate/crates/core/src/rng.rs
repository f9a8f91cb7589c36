//! Seed derivation for deterministic substreams.
//!
//! Every source of randomness in a run (model init, client sampling, each
//! client's batches and noise, ...) draws from its own ChaCha stream whose seed
//! is derived from the run seed plus a role tag. Results are therefore
//! independent of scheduling order when clients or seeds run in parallel.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for combining seed words.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Combine a run seed with role words into one substream seed.
pub fn derive_seed(base: u64, words: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &w in words {
        acc = splitmix64(acc ^ splitmix64(w));
    }
    acc
}

/// Stream tags used throughout the simulator.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    ModelInit,
    ClientSampling,
    Batches,
    GradientNoise,
    LambdaNoise,
    StatsNoise,
    Synthetic,
    Partition,
    Sweep,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ModelInit => 0x01,
            Stream::ClientSampling => 0x02,
            Stream::Batches => 0x03,
            Stream::GradientNoise => 0x04,
            Stream::LambdaNoise => 0x05,
            Stream::StatsNoise => 0x06,
            Stream::Synthetic => 0x07,
            Stream::Partition => 0x08,
            Stream::Sweep => 0x09,
        }
    }
}

/// RNG for a run-level stream (no client/round structure).
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream.tag()]))
}

/// RNG for a per-client, per-round stream.
pub fn client_rng(seed: u64, stream: Stream, client: u64, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream.tag(), client, round]))
}
