//! Shared fixtures for the benchmarks.

use densemath::data::synth::{builtin_vocabulary, synth_corpus, Tier};
use densemath::data::Sample;
use densemath::model::{Model, ModelConfig};
use densemath::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    densemath::param::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn toy_model(seed: u64) -> Model {
    Model::new(ModelConfig::toy(), builtin_vocabulary(), seed).expect("toy config is valid")
}

pub fn samples(n: usize) -> Vec<Sample> {
    synth_corpus(n, 11, Tier::Decimal).expect("n is positive")
}
