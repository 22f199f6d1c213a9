#![allow(dead_code)]

use mapre::corpus::{BenchmarkParams, SyntheticBenchmark};
use mapre::encoder::EncoderConfig;
use mapre::training::{MapreModel, ModelConfig};

/// A benchmark small enough for fast per-test training.
pub fn small_benchmark(seed: u64) -> SyntheticBenchmark {
    let params = BenchmarkParams {
        pretrain_relations: 6,
        train_relations: 6,
        validation_relations: 2,
        test_relations: 3,
        entities_per_relation: 4,
        sentences_per_triple: 3,
        vocab_size: 120,
        seed,
        ..Default::default()
    };
    SyntheticBenchmark::generate(&params).expect("small benchmark")
}

pub fn small_model(vocab_size: usize, seed: u64) -> MapreModel {
    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            feedforward_dim: 16,
            vocab_size,
            max_len: 32,
            dropout: 0.0,
        },
        ..Default::default()
    };
    MapreModel::new(config, seed).expect("small model")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
