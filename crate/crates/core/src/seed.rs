//! Deterministic derivation of per-query random streams from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream type used for every stochastic operation in the crate.
pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit key. Order sensitive.
pub fn hash_words(words: impl IntoIterator<Item = u64>) -> u64 {
    words
        .into_iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, w| mix64(acc ^ mix64(w)))
}

/// Stream for `(master, query, step)`. Independent of evaluation order, so
/// rollouts generated in parallel are identical to sequential generation.
pub fn stream(master: u64, query: u32, step: u64) -> Stream {
    Stream::seed_from_u64(hash_words([master, u64::from(query), step]))
}

/// Stream tagged with an extra purpose label (initialisation, evaluation, ...).
pub fn tagged_stream(master: u64, tag: u64, query: u32) -> Stream {
    Stream::seed_from_u64(hash_words([master, tag, u64::from(query)]))
}
