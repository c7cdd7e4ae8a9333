//! Shared fixtures for unit tests: small corpora and training configs that
//! run in seconds.

use crate::data::{generate_dataset, grouped_kfold, CorpusConfig, Dataset, FoldSplit};
use crate::encoders::Regime;
use crate::training::TrainingConfig;

pub fn toy_corpus_config(n_systems: usize, bodies: usize, frames: usize) -> CorpusConfig {
    CorpusConfig {
        n_systems,
        cycles_per_system: (1, 2),
        bodies,
        frames,
        ..CorpusConfig::default()
    }
}

pub fn toy_dataset(n_systems: usize, bodies: usize, frames: usize, seed: u64) -> Dataset {
    generate_dataset(&toy_corpus_config(n_systems, bodies, frames), seed).unwrap()
}

pub fn toy_folds(dataset: &Dataset, seed: u64) -> Vec<FoldSplit> {
    grouped_kfold(&dataset.samples, 3, seed).unwrap()
}

pub fn toy_training_config(regime: Regime) -> TrainingConfig {
    TrainingConfig {
        regime,
        epochs: 3,
        batch_size: 4,
        encoder_hidden: 8,
        decoder_hidden: 16,
        seed: 7,
        ..TrainingConfig::default()
    }
}
