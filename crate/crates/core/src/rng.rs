use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LitRng = ChaCha8Rng;

/// Deterministic generator for a seed.
pub fn seeded(seed: u64) -> LitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from `seed` and a stream label (e.g. an epoch number).
pub fn derived(seed: u64, stream: u64) -> LitRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_add(1));
    rng
}
