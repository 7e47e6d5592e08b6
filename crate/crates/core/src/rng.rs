//! Deterministic, tag-addressed RNG streams.
//!
//! Every stochastic component draws from a stream keyed by (seed, tags), so
//! runs are bit-reproducible and per-pixel/per-step streams never collide.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream from a base seed and a tag path.
pub fn rng_stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x5851f42d4c957f2d;
    let mut key = [0u8; 32];
    for tag in tags {
        state ^= splitmix64(&mut state) ^ tag.wrapping_mul(0xd6e8feb86659fd93);
    }
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
