use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from a root seed and a path of stream ids.
pub(crate) fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub(crate) fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

// Stream tags keep the derived seeds of unrelated stages apart.
pub(crate) const TAG_SPAWN: u64 = 1;
pub(crate) const TAG_RENDER: u64 = 2;
pub(crate) const TAG_REFERENCE: u64 = 3;
pub(crate) const TAG_SAMPLES: u64 = 4;
pub(crate) const TAG_TRAIN: u64 = 5;
pub(crate) const TAG_REFINE: u64 = 6;
pub(crate) const TAG_GROUND: u64 = 7;
pub(crate) const TAG_DETECT: u64 = 8;
pub(crate) const TAG_INIT: u64 = 9;
