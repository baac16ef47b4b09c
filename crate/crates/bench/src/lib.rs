//! Shared fixtures for the benchmarks.

use crossview_core::model::{Model, ModelConfig};
use crossview_core::sequence::TokenSequence;
use crossview_core::synthbench::{generate_dataset, DatasetSpec, Sample};
use crossview_core::Tensor;

/// Four 9-token images, each followed by `text` text tokens.
pub fn layout(text: usize) -> TokenSequence {
    TokenSequence::from_lengths(&[9, 9, 9, 9], &[text, text, text, text], 0).expect("valid layout")
}

/// Deterministic pseudo-random scores, one per position.
pub fn scores(seq: &TokenSequence) -> Vec<Option<f64>> {
    (0..seq.len())
        .map(|i| seq.image_of(i).map(|_| ((i * 7919) % 101) as f64 / 101.0))
        .collect()
}

/// `t × d` matrix filled with a fixed pattern.
pub fn matrix(t: usize, d: usize, phase: usize) -> Tensor {
    let data = (0..t * d).map(|i| (((i + phase) * 37 % 97) as f64 / 97.0) - 0.5).collect();
    Tensor::new(vec![t, d], data).expect("shape matches data")
}

pub fn model() -> Model {
    Model::init(ModelConfig::default()).expect("default config is valid")
}

pub fn samples(n: usize) -> Vec<Sample> {
    generate_dataset(&DatasetSpec { size: n, seed: 1, ..DatasetSpec::default() }).expect("default dataset settings are valid")
}
