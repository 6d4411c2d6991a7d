//! Shared fixtures for the criterion benchmarks in `benches/`.

use layoutforge_core::data::{generate_synthetic_corpus, CorpusConfig};
use layoutforge_core::training::train;
use layoutforge_core::{AspectClass, ClassVocab, Layout, ModelCheckpoint, TrainingConfig};

pub fn square_corpus(n: usize, seed: u64) -> Vec<Layout> {
    let cfg = CorpusConfig::for_aspect(AspectClass::Square, n, seed);
    generate_synthetic_corpus(&cfg, &ClassVocab::default()).expect("default corpus config is valid")
}

/// Default-sized square model after a single training step.
pub fn trained_checkpoint(order_conditioning: bool) -> ModelCheckpoint {
    let cfg = TrainingConfig {
        steps: 1,
        batch_size: 4,
        eval_every: 0,
        eval_samples: 0,
        aspect_class: Some(AspectClass::Square),
        order_conditioning,
        ..TrainingConfig::default()
    };
    train(&cfg, &square_corpus(16, 1)).expect("training fixture").checkpoint
}
