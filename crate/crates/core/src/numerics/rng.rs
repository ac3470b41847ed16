use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams derived from a single run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Gumbel = 3,
    Sampling = 4,
    Probe = 5,
    AdapterInit = 6,
    GeneratorInit = 7,
}

/// Independent ChaCha stream for `(seed, stream)`.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
