//! Inputs shared by the benchmarks.

use anamnesis_core::corpus::Corpus;
use anamnesis_core::fixtures;
use anamnesis_core::synthetic::generate_synthetic_corpus;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probability rows resembling trained extractor output: mostly near zero
/// with occasional confident tokens.
pub fn probability_rows(n: usize, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = || -> Vec<f32> {
        (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    rng.random_range(0.6..1.0)
                } else {
                    rng.random_range(0.0..0.2)
                }
            })
            .collect()
    };
    (row(), row())
}

pub fn corpus(size: usize) -> Corpus {
    generate_synthetic_corpus(&fixtures::ontology(), size, 1).expect("synthetic corpus")
}
