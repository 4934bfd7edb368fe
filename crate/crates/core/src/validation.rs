//! Self-checks and small synthetic experiments run by `trasend validate` and
//! the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trasend_autodiff::{gradcheck_params, one_hot, AdamConfig, GradcheckReport, Mode, ParamStore, Reduction, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Pass, SensorSpec, Variant};
use crate::personalize::{permuted_label_validation, personalize_run};
use crate::pipeline::preprocess_dataset;
use crate::preprocess::{split_seed, AugmentationSpec, PreprocessConfig, PreprocessedSample};
use crate::synth::{generate_synthetic_dataset, SyntheticSpec};
use crate::train::{leave_one_user_out, NeuralLearner, TrainConfig};

/// Gradient checks use this step and pass below this relative error.
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// The tiny architecture on the smallest input that exercises every layer:
/// two 2-axis sensors, 4 timesteps, 8 frequency bins (the conv stack needs
/// at least 7) and 3 classes.
pub fn gradcheck_model_config(variant: Variant) -> ModelConfig {
    let sensors = (0..2)
        .map(|i| SensorSpec {
            id: format!("s{i}"),
            dims: 2,
        })
        .collect();
    ModelConfig::tiny(sensors, 4, 8, 3, variant)
}

/// Moves every parameter off its initial value so zero biases and unit
/// running variances do not hide mistakes.
fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let variance = store.get(id).name().ends_with("running_var");
        for v in store.value_mut(id).data_mut() {
            if variance {
                *v = rng.random_range(0.5..1.5);
            } else {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
}

/// Gradient check of the whole inference graph, with respect to every
/// trainable parameter, for one variant.
pub fn model_gradcheck(variant: Variant, seed: u64) -> Result<GradcheckReport> {
    let config = gradcheck_model_config(variant);
    let model = Model::new(config.clone())?;
    let mut store = model.init_params(seed)?;
    perturb(&mut store, split_seed(seed, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 2));
    let inputs: Vec<Tensor> = (0..config.num_sensors())
        .map(|s| Tensor::from_fn(&[2, config.timesteps, config.input_width(s)], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let targets = one_hot(&[0, 2], config.num_classes)?;
    let report = gradcheck_params(
        |tape, params| {
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let out = model
                .forward(Pass::new(tape, params, Mode::Eval, &mut unused), &vars)
                .map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => trasend_autodiff::Error::Contract(other.to_string()),
                })?;
            tape.softmax_cross_entropy(out.logits, &targets, Reduction::Mean)
        },
        &store,
        GRADCHECK_EPS,
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Every primitive at 20 random points, then the full model per variant.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut out: Vec<CheckLine> = trasend_autodiff::primitive_gradchecks(20, GRADCHECK_EPS)?
        .into_iter()
        .map(|c| CheckLine {
            name: c.name.to_string(),
            max_rel_error: c.max_rel_error,
            passed: c.max_rel_error < GRADCHECK_TOL,
        })
        .collect();
    for variant in Variant::ALL {
        let r = model_gradcheck(variant, seed)?;
        out.push(CheckLine {
            name: format!("model/{}", variant.cli_name()),
            max_rel_error: r.max_rel_error,
            passed: r.max_rel_error < GRADCHECK_TOL,
        });
    }
    Ok(out)
}

fn synthetic_samples(spec: &SyntheticSpec, pre: &PreprocessConfig, aug: &AugmentationSpec, seed: u64) -> Result<Vec<PreprocessedSample>> {
    preprocess_dataset(&generate_synthetic_dataset(spec)?, pre, aug, seed)
}

fn tiny_config(spec: &SyntheticSpec, pre: &PreprocessConfig, variant: Variant) -> Result<ModelConfig> {
    let sensors = spec
        .sensors
        .iter()
        .map(|s| SensorSpec {
            id: s.id.clone(),
            dims: s.dims,
        })
        .collect();
    let timesteps = crate::preprocess::Preprocessor::new(*pre)?.timesteps();
    let config = ModelConfig::tiny(sensors, timesteps, pre.freq_bins, spec.classes, variant);
    config.validate()?;
    Ok(config)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Train on one user's samples with shuffled labels, then adapt the output
/// layer to a second user with the true labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermutedLabelExperiment {
    pub data: SyntheticSpec,
    pub preprocess: PreprocessConfig,
    pub variant: Variant,
    pub train: TrainConfig,
    pub personalization: AdamConfig,
    pub seeds: Vec<u64>,
}

impl Default for PermutedLabelExperiment {
    fn default() -> Self {
        Self {
            data: SyntheticSpec {
                users: 2,
                classes: 6,
                samples_per_class: 100,
                noise: 0.5,
                ..SyntheticSpec::default()
            },
            preprocess: PreprocessConfig::default(),
            variant: Variant::Trasend,
            train: TrainConfig {
                epochs: 10,
                augmentation: AugmentationSpec::none(),
                ..TrainConfig::default()
            },
            personalization: AdamConfig::personalization(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutedLabelRun {
    pub seed: u64,
    pub f1_random_train: f64,
    pub f1_after_personalization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutedLabelSummary {
    pub chance: f64,
    pub runs: Vec<PermutedLabelRun>,
    pub mean_f1_random_train: f64,
    pub mean_f1_after_personalization: f64,
}

impl PermutedLabelSummary {
    pub fn mean_improvement(&self) -> f64 {
        self.mean_f1_after_personalization - self.mean_f1_random_train
    }
}

pub fn permuted_label_experiment(exp: &PermutedLabelExperiment) -> Result<PermutedLabelSummary> {
    if exp.data.users < 2 {
        return Err(Error::Config("the permuted-label experiment needs two users".into()));
    }
    let mut runs = Vec::new();
    for &seed in &exp.seeds {
        let spec = SyntheticSpec {
            seed,
            ..exp.data.clone()
        };
        let samples = synthetic_samples(&spec, &exp.preprocess, &AugmentationSpec::none(), seed)?;
        let model = Model::new(tiny_config(&spec, &exp.preprocess, exp.variant)?)?;
        let users = spec.user_ids();
        let train_set: Vec<&PreprocessedSample> = samples.iter().filter(|s| s.user_id == users[0]).collect();
        let target: Vec<&PreprocessedSample> = samples.iter().filter(|s| s.user_id == users[1]).collect();
        let train = TrainConfig {
            seed,
            ..exp.train.clone()
        };
        let r = permuted_label_validation(&model, &train_set, &target, &train, exp.personalization, seed)?;
        log::info!(
            "permuted labels, seed {seed}: {:.3} -> {:.3}",
            r.f1_random_train,
            r.f1_after_personalization
        );
        runs.push(PermutedLabelRun {
            seed,
            f1_random_train: r.f1_random_train,
            f1_after_personalization: r.f1_after_personalization,
        });
    }
    Ok(PermutedLabelSummary {
        chance: 1.0 / exp.data.classes as f64,
        mean_f1_random_train: mean(runs.iter().map(|r| r.f1_random_train)),
        mean_f1_after_personalization: mean(runs.iter().map(|r| r.f1_after_personalization)),
        runs,
    })
}

/// Leave-one-user-out with and without augmented copies. Training data comes
/// from `data`; test data is the same timeline regenerated with
/// `test_noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationAblation {
    pub data: SyntheticSpec,
    pub test_noise: f64,
    pub preprocess: PreprocessConfig,
    pub variant: Variant,
    pub train: TrainConfig,
    pub augmentation: AugmentationSpec,
    pub seeds: Vec<u64>,
}

impl Default for AugmentationAblation {
    fn default() -> Self {
        Self {
            data: SyntheticSpec {
                samples_per_class: 20,
                noise: 0.1,
                user_freq_shift: 0.5,
                jitter: 0.2,
                ..SyntheticSpec::default()
            },
            test_noise: 1.0,
            preprocess: PreprocessConfig::default(),
            variant: Variant::Trasend,
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            augmentation: AugmentationSpec::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub f1_without: f64,
    pub f1_with: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub copies: usize,
    pub runs: Vec<AblationRun>,
    pub mean_without: f64,
    pub mean_with: f64,
}

impl AblationSummary {
    pub fn mean_gain(&self) -> f64 {
        self.mean_with - self.mean_without
    }
}

pub fn augmentation_ablation(exp: &AugmentationAblation) -> Result<AblationSummary> {
    exp.augmentation.validate()?;
    let mut runs = Vec::new();
    for &seed in &exp.seeds {
        let clean = SyntheticSpec {
            seed,
            ..exp.data.clone()
        };
        let noisy = SyntheticSpec {
            noise: exp.test_noise,
            ..clean.clone()
        };
        let test = synthetic_samples(&noisy, &exp.preprocess, &AugmentationSpec::none(), seed)?;
        let config = tiny_config(&clean, &exp.preprocess, exp.variant)?;
        let score = |aug: &AugmentationSpec| -> Result<f64> {
            let train_pool = synthetic_samples(&clean, &exp.preprocess, aug, split_seed(seed, 3))?;
            let train = TrainConfig {
                augmentation: aug.clone(),
                ..exp.train.clone()
            };
            let mut learner = NeuralLearner::new(Model::new(config.clone())?, train);
            let run = leave_one_user_out(&train_pool, &test, clean.classes, &mut learner, seed)?;
            Ok(run.report.aggregate_f1)
        };
        let f1_without = score(&AugmentationSpec::none())?;
        let f1_with = score(&exp.augmentation)?;
        log::info!("augmentation ablation, seed {seed}: {f1_without:.4} without, {f1_with:.4} with");
        runs.push(AblationRun {
            seed,
            f1_without,
            f1_with,
        });
    }
    Ok(AblationSummary {
        copies: exp.augmentation.copies,
        mean_without: mean(runs.iter().map(|r| r.f1_without)),
        mean_with: mean(runs.iter().map(|r| r.f1_with)),
        runs,
    })
}

/// Leave-one-user-out training, then output-layer adaptation of each fold's
/// model to its held-out user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizationExperiment {
    pub data: SyntheticSpec,
    pub preprocess: PreprocessConfig,
    pub variant: Variant,
    pub train: TrainConfig,
    pub personalization: AdamConfig,
    pub seed: u64,
}

impl Default for PersonalizationExperiment {
    fn default() -> Self {
        Self {
            data: SyntheticSpec {
                samples_per_class: 160,
                noise: 0.5,
                user_freq_shift: 3.0,
                ..SyntheticSpec::default()
            },
            preprocess: PreprocessConfig::default(),
            variant: Variant::Trasend,
            train: TrainConfig {
                epochs: 10,
                augmentation: AugmentationSpec::none(),
                ..TrainConfig::default()
            },
            personalization: AdamConfig::personalization(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserGain {
    pub user_id: String,
    pub f1_before: f64,
    pub f1_after: f64,
    pub prequential_accuracy: Option<f64>,
    /// The adapted model's feature extractor matched the fold model bitwise.
    pub extractor_unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationSummary {
    pub users: Vec<UserGain>,
    pub mean_gain: f64,
    /// Fraction of users whose F1 did not drop.
    pub non_negative_fraction: f64,
}

pub fn personalization_experiment(exp: &PersonalizationExperiment) -> Result<PersonalizationSummary> {
    let spec = SyntheticSpec {
        seed: exp.seed,
        ..exp.data.clone()
    };
    let samples = synthetic_samples(&spec, &exp.preprocess, &AugmentationSpec::none(), exp.seed)?;
    let model = Model::new(tiny_config(&spec, &exp.preprocess, exp.variant)?)?;
    let mut learner = NeuralLearner::new(
        model.clone(),
        TrainConfig {
            augmentation: AugmentationSpec::none(),
            ..exp.train.clone()
        },
    );
    learner.keep_params = true;
    let run = leave_one_user_out(&samples, &samples, spec.classes, &mut learner, exp.seed)?;
    let mut users = Vec::new();
    for (user, params) in &run.params {
        let own: Vec<&PreprocessedSample> = samples.iter().filter(|s| &s.user_id == user).collect();
        let (report, adapted) = personalize_run(&model, params, &own, exp.personalization)?;
        log::info!("personalization {user}: {:.3} -> {:.3}", report.f1_before, report.f1_after);
        users.push(UserGain {
            user_id: user.clone(),
            f1_before: report.f1_before,
            f1_after: report.f1_after,
            prequential_accuracy: report.prequential_accuracy,
            extractor_unchanged: adapted.group_bitwise_eq(params, trasend_autodiff::ParamGroup::FeatureExtractor),
        });
    }
    Ok(PersonalizationSummary {
        mean_gain: mean(users.iter().map(|u| u.f1_after - u.f1_before)),
        non_negative_fraction: mean(users.iter().map(|u| if u.f1_after >= u.f1_before { 1.0 } else { 0.0 })),
        users,
    })
}
