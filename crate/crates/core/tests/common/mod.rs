#![allow(dead_code)]

use std::path::Path;

use mtrnet::datagen::{generate_corpus, generate_sample, sample_rng, BackgroundSource, RenderSpec, SceneSample};
use mtrnet::model::{DiscriminatorSpec, GeneratorSpec};
use mtrnet::pipeline::PreparedSample;
use mtrnet::training::{batch_for_step, Trainer, TrainingConfig};

/// Small canvases with a few axis-aligned words.
pub fn small_spec(seed: u64) -> RenderSpec {
    RenderSpec {
        canvas_width: 64,
        canvas_height: 48,
        words_per_image: (1, 3),
        font_size: (10, 16),
        background: BackgroundSource::Procedural { noise: 2 },
        seed,
        ..RenderSpec::default()
    }
}

pub fn samples(spec: &RenderSpec, n: usize) -> Vec<SceneSample> {
    (0..n)
        .map(|i| generate_sample(spec, &mut sample_rng(spec.seed, i as u64), format!("{i:04}")).unwrap())
        .collect()
}

pub fn prepared(samples: &[SceneSample], size: u32) -> Vec<PreparedSample> {
    samples.iter().map(|s| PreparedSample::new(s, None, size).unwrap()).collect()
}

pub fn test_config() -> TrainingConfig {
    TrainingConfig {
        batch_size: 4,
        width_multiplier: 0.125,
        epoch_size: 1000,
        epochs: 1,
        lr0: 0.002,
        ..TrainingConfig::default()
    }
}

pub fn test_trainer(cfg: TrainingConfig) -> Trainer<f32> {
    Trainer::with_specs(cfg, GeneratorSpec::test_scale(), DiscriminatorSpec::test_scale()).unwrap()
}

/// Test-scale model trained for `steps` on `corpus`.
pub fn overfit(corpus: &[PreparedSample], steps: u64) -> Trainer<f32> {
    let mut t = test_trainer(test_config());
    for k in 0..steps {
        let batch = batch_for_step(corpus, &t.config, k);
        t.train_step(&batch).unwrap();
    }
    t
}

pub fn write_corpus(spec: &RenderSpec, n: usize, dir: &Path) {
    generate_corpus(spec, n, dir).unwrap();
}
