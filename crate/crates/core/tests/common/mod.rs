//! Small synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use trasend_core::model::{Model, ModelConfig, Variant};
use trasend_core::pipeline::preprocess_dataset;
use trasend_core::preprocess::{AugmentationSpec, PreprocessConfig, PreprocessedSample};
use trasend_core::synth::{generate_synthetic_dataset, SyntheticSpec};
use trasend_core::train::TrainConfig;

/// 2 s windows: T = 8, f = 10.
pub fn short_windows() -> PreprocessConfig {
    PreprocessConfig {
        sample_len: 2.0,
        ..PreprocessConfig::default()
    }
}

pub fn small_spec(users: usize, classes: usize, per_class: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        users,
        classes,
        samples_per_class: per_class,
        sample_len: 2.0,
        bout_samples: 2,
        noise: 0.3,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn samples(spec: &SyntheticSpec, augmentation: &AugmentationSpec) -> Vec<PreprocessedSample> {
    let ds = generate_synthetic_dataset(spec).unwrap();
    preprocess_dataset(&ds, &short_windows(), augmentation, 99).unwrap()
}

pub fn tiny_model(spec: &SyntheticSpec, variant: Variant) -> Model {
    let sensors = generate_synthetic_dataset(&SyntheticSpec { samples_per_class: 1, ..spec.clone() })
        .unwrap()
        .manifest
        .sensor_specs();
    Model::new(ModelConfig::tiny(sensors, 8, 10, spec.classes, variant)).unwrap()
}

pub fn quick_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 3e-3,
        seed,
        augmentation: AugmentationSpec::none(),
        ..TrainConfig::default()
    }
}

pub fn refs(samples: &[PreprocessedSample]) -> Vec<&PreprocessedSample> {
    samples.iter().collect()
}
