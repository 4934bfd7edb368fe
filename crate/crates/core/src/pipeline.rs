//! Run configuration and the dataset → samples step shared by the CLI and
//! the experiment drivers.

use serde::{Deserialize, Serialize};
use trasend_autodiff::{AdamConfig, Tensor};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Reduction, SensorSpec, Variant};
use crate::preprocess::{AugmentationSpec, Origin, PreprocessConfig, PreprocessedSample, Preprocessor};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureSize {
    Full,
    Tiny,
}

/// Architecture choices that do not depend on the data; `None` keeps the
/// size preset's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub size: ArchitectureSize,
    pub conv_filters: Option<usize>,
    pub gru_units: Option<usize>,
    pub heads: Option<usize>,
    pub d_k: Option<usize>,
    pub ffn_hidden: Option<usize>,
    pub dropout_conv: Option<f64>,
    pub dropout_rnn: Option<f64>,
    pub reduction: Reduction,
    pub positional_encoding: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            size: ArchitectureSize::Full,
            conv_filters: None,
            gru_units: None,
            heads: None,
            d_k: None,
            ffn_hidden: None,
            dropout_conv: None,
            dropout_rnn: None,
            reduction: Reduction::Mean,
            positional_encoding: true,
        }
    }
}

impl ArchitectureConfig {
    pub fn model_config(
        &self,
        sensors: Vec<SensorSpec>,
        timesteps: usize,
        freq_bins: usize,
        num_classes: usize,
        variant: Variant,
    ) -> ModelConfig {
        let base = match self.size {
            ArchitectureSize::Full => ModelConfig::new(sensors, timesteps, freq_bins, num_classes, variant),
            ArchitectureSize::Tiny => ModelConfig::tiny(sensors, timesteps, freq_bins, num_classes, variant),
        };
        ModelConfig {
            conv_filters: self.conv_filters.unwrap_or(base.conv_filters),
            gru_units: self.gru_units.unwrap_or(base.gru_units),
            heads: self.heads.unwrap_or(base.heads),
            d_k: self.d_k.unwrap_or(base.d_k),
            ffn_hidden: self.ffn_hidden.or(base.ffn_hidden),
            dropout_conv: self.dropout_conv.unwrap_or(base.dropout_conv),
            dropout_rnn: self.dropout_rnn.unwrap_or(base.dropout_rnn),
            reduction: self.reduction,
            positional_encoding: self.positional_encoding,
            ..base
        }
    }
}

/// Everything an experiment needs besides the data. Unknown keys are
/// rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub preprocess: PreprocessConfig,
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    /// Choose the learning rate from `train.lr_candidates` before training.
    pub select_learning_rate: bool,
    pub personalization: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Trasend,
            preprocess: PreprocessConfig::default(),
            architecture: ArchitectureConfig::default(),
            train: TrainConfig::default(),
            select_learning_rate: false,
            personalization: AdamConfig::personalization(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self, dataset_sensors: Vec<SensorSpec>, num_classes: usize) -> Result<ModelConfig> {
        let pre = Preprocessor::new(self.preprocess)?;
        let config = self.architecture.model_config(
            dataset_sensors,
            pre.timesteps(),
            self.preprocess.freq_bins,
            num_classes,
            self.variant,
        );
        config.validate()?;
        Ok(config)
    }
}

/// Real samples of every labelled window, followed by augmented copies.
pub fn preprocess_dataset(
    dataset: &Dataset,
    config: &PreprocessConfig,
    augmentation: &AugmentationSpec,
    seed: u64,
) -> Result<Vec<PreprocessedSample>> {
    let pre = Preprocessor::new(*config)?;
    let windows = dataset.windows(config);
    pre.build_with_augmentation(&windows, augmentation, seed)
}

/// Serialized form of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub user_id: String,
    pub label: usize,
    pub start: f64,
    pub origin: Origin,
    pub tensors: Vec<Tensor>,
}

/// A preprocessed dataset as written by the `preprocess` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleArchive {
    pub preprocess: PreprocessConfig,
    pub sensors: Vec<SensorSpec>,
    pub num_classes: usize,
    pub samples: Vec<SampleRecord>,
}

impl SampleArchive {
    pub fn new(preprocess: PreprocessConfig, sensors: Vec<SensorSpec>, num_classes: usize, samples: &[PreprocessedSample]) -> Self {
        Self {
            preprocess,
            sensors,
            num_classes,
            samples: samples
                .iter()
                .map(|s| SampleRecord {
                    user_id: s.user_id.clone(),
                    label: s.label,
                    start: s.start,
                    origin: s.origin,
                    tensors: s.tensors.clone(),
                })
                .collect(),
        }
    }

    pub fn into_samples(self) -> Vec<PreprocessedSample> {
        self.samples
            .into_iter()
            .map(|r| PreprocessedSample {
                tensors: r.tensors,
                label: r.label,
                user_id: r.user_id,
                origin: r.origin,
                start: r.start,
            })
            .collect()
    }
}
