use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `index` of the generator seeded with `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
