//! Mini-batch training, leave-one-user-out evaluation and learning-rate
//! selection.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trasend_autodiff::{one_hot, Adam, AdamConfig, Mode, ParamStore, Reduction, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::model::{argmax_rows, Model, Pass};
use crate::preprocess::{split_seed, AugmentationSpec, Origin, PreprocessedSample};

pub const DEFAULT_LR_CANDIDATES: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Samples per inference batch.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_candidates: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
            augmentation: AugmentationSpec::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_candidates: DEFAULT_LR_CANDIDATES.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.lr_candidates.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.augmentation.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when training without a validation set.
    pub val_f1: Option<f64>,
    /// Excluded from reports, which must be reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: EpochHistory,
}

/// Per-sensor `B × T × 2fd` inputs for a batch of samples.
pub fn batch_inputs(samples: &[&PreprocessedSample]) -> Result<Vec<Tensor>> {
    let Some(first) = samples.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    let sensors = first.tensors.len();
    let mut out = Vec::with_capacity(sensors);
    for s in 0..sensors {
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for sample in samples {
            let x = sample
                .tensors
                .get(s)
                .ok_or_else(|| Error::Alignment("samples have different sensor counts".into()))?;
            let rows = sample.timestep_rows(s);
            if shape.is_empty() {
                shape = rows.shape().to_vec();
            } else if rows.shape() != shape.as_slice() {
                return Err(Error::Alignment(format!(
                    "sample tensor shape {:?} differs within the batch",
                    x.shape()
                )));
            }
            data.extend_from_slice(rows.data());
        }
        out.push(Tensor::new(vec![samples.len(), shape[0], shape[1]], data)?);
    }
    Ok(out)
}

/// Eval-mode class predictions.
pub fn predict(model: &Model, params: &ParamStore, samples: &[&PreprocessedSample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let probs = model.predict_proba(params, &batch_inputs(chunk)?)?;
        out.extend(argmax_rows(&probs));
    }
    Ok(out)
}

/// Confusion matrix of the model's predictions on `samples`.
pub fn evaluate(model: &Model, params: &ParamStore, samples: &[&PreprocessedSample]) -> Result<Confusion> {
    let pred = predict(model, params, samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Confusion::from_labels(&pred, &truth, model.config().num_classes)
}

/// Runs one Adam step on a batch; returns the mean cross-entropy, or NaN
/// (without touching the parameters) when the loss or a gradient is not finite.
fn train_step(
    model: &Model,
    params: &mut ParamStore,
    adam: &mut Adam,
    batch: &[&PreprocessedSample],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let inputs = batch_inputs(batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let targets = one_hot(&labels, model.config().num_classes)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.into_iter().map(|x| tape.constant(x)).collect();
    let out = model.forward(Pass::new(&mut tape, params, Mode::Train, rng), &vars)?;
    let loss = tape.softmax_cross_entropy(out.logits, &targets, Reduction::Mean)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward_params(loss, params)?;
    if grads.iter().any(|(_, g)| !g.is_finite()) {
        return Ok(f64::NAN);
    }
    adam.step(params, &grads)?;
    model.apply_bn_updates(params, &out.bn_updates)?;
    Ok(value)
}

/// Trains from `init` for `config.epochs` epochs of shuffled mini-batches.
/// After every epoch the model is scored on `val`; the parameters of the
/// epoch with the highest macro-F1 are returned (earliest on ties, last
/// epoch when `val` is empty).
pub fn train(
    model: &Model,
    init: ParamStore,
    train_set: &[&PreprocessedSample],
    val: &[&PreprocessedSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    model.check_params(&init)?;
    let mut params = init;
    let mut adam = Adam::new(config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = EpochHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreprocessedSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let loss = train_step(model, &mut params, &mut adam, &batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    learning_rate: config.learning_rate,
                });
            }
            total += loss * batch.len() as f64;
        }
        let val_f1 = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, &params, val)?.macro_f1())
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_f1,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: loss {:.4}, val F1 {:?}, {:.1}s",
            record.train_loss,
            record.val_f1,
            record.wall_time_s
        );
        history.epochs.push(record);
        let score = val_f1.unwrap_or(f64::NEG_INFINITY);
        let improves = match &best {
            None => true,
            Some((b, _)) => score > *b || (val_f1.is_none() && epoch == config.epochs),
        };
        if improves {
            best = Some((score, params.clone()));
            history.best_epoch = epoch;
        }
    }
    let (_, params) = best.expect("at least one epoch");
    Ok(TrainOutcome { params, history })
}

/// Output of one cross-validation fold.
pub struct FoldOutput {
    pub predictions: Vec<usize>,
    pub history: Option<EpochHistory>,
    pub params: Option<ParamStore>,
}

/// Something that can be trained on one fold and predict its test samples.
pub trait FoldLearner {
    fn fit_predict(
        &mut self,
        train: &[&PreprocessedSample],
        test: &[&PreprocessedSample],
        seed: u64,
    ) -> Result<FoldOutput>;

    /// Description of the learner's configuration, hashed into reports.
    fn fingerprint(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// Trains a fresh model per fold.
pub struct NeuralLearner {
    pub model: Model,
    pub config: TrainConfig,
    /// Keep trained parameters in the fold output.
    pub keep_params: bool,
}

impl NeuralLearner {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        Self {
            model,
            config,
            keep_params: false,
        }
    }
}

impl FoldLearner for NeuralLearner {
    fn fit_predict(
        &mut self,
        train_set: &[&PreprocessedSample],
        test: &[&PreprocessedSample],
        seed: u64,
    ) -> Result<FoldOutput> {
        let init = self.model.init_params(seed)?;
        let config = TrainConfig {
            seed: split_seed(seed, 1),
            ..self.config.clone()
        };
        let outcome = train(&self.model, init, train_set, test, &config)?;
        let predictions = predict(&self.model, &outcome.params, test)?;
        Ok(FoldOutput {
            predictions,
            history: Some(outcome.history),
            params: self.keep_params.then_some(outcome.params),
        })
    }

    fn fingerprint(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.model.config(), "train": self.config })
    }
}

/// Indices of one leave-one-user-out fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub user_id: String,
    /// into the training pool
    pub train: Vec<usize>,
    /// into the test pool; real samples only
    pub test: Vec<usize>,
}

/// One fold per user of `test_pool` (sorted by id): train on every
/// `train_pool` sample from other users, test on that user's real samples.
pub fn louo_folds(train_pool: &[PreprocessedSample], test_pool: &[PreprocessedSample]) -> Vec<Fold> {
    let mut users: Vec<&str> = test_pool.iter().chain(train_pool).map(|s| s.user_id.as_str()).collect();
    users.sort_unstable();
    users.dedup();
    users
        .into_iter()
        .map(|u| Fold {
            user_id: u.to_string(),
            train: (0..train_pool.len()).filter(|&i| train_pool[i].user_id != u).collect(),
            test: (0..test_pool.len())
                .filter(|&i| test_pool[i].user_id == u && test_pool[i].origin == Origin::Real)
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserReport {
    pub f1: f64,
    pub confusion: Confusion,
    pub test_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<EpochHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_user: BTreeMap<String, UserReport>,
    pub aggregate_f1: f64,
    pub f1_averaging: String,
    pub config_hash: String,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Hex SHA-256 prefix of a JSON value's canonical text.
pub fn fingerprint_hash(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-fold results kept alongside the report.
pub struct LouoRun {
    pub report: EvalReport,
    /// user id → trained parameters, when the learner returns them
    pub params: BTreeMap<String, ParamStore>,
}

/// Leave-one-user-out cross-validation. Training uses `train_pool` (which may
/// contain augmented samples); testing uses real samples of `test_pool`.
/// Pass the same slice twice for the ordinary protocol.
pub fn leave_one_user_out<L: FoldLearner>(
    train_pool: &[PreprocessedSample],
    test_pool: &[PreprocessedSample],
    num_classes: usize,
    learner: &mut L,
    seed: u64,
) -> Result<LouoRun> {
    let folds = louo_folds(train_pool, test_pool);
    if folds.len() < 2 {
        return Err(Error::Contract(format!(
            "leave-one-user-out needs at least 2 users, found {}",
            folds.len()
        )));
    }
    let mut per_user = BTreeMap::new();
    let mut params = BTreeMap::new();
    let mut warnings = Vec::new();
    for (k, fold) in folds.iter().enumerate() {
        if fold.test.is_empty() {
            let msg = format!("user {} has no real test samples; fold skipped", fold.user_id);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let train: Vec<&PreprocessedSample> = fold.train.iter().map(|&i| &train_pool[i]).collect();
        let test: Vec<&PreprocessedSample> = fold.test.iter().map(|&i| &test_pool[i]).collect();
        let out = learner.fit_predict(&train, &test, split_seed(seed, k as u64))?;
        let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
        let confusion = Confusion::from_labels(&out.predictions, &truth, num_classes)?;
        log::info!("fold {}: macro-F1 {:.4}", fold.user_id, confusion.macro_f1());
        if let Some(p) = out.params {
            params.insert(fold.user_id.clone(), p);
        }
        per_user.insert(
            fold.user_id.clone(),
            UserReport {
                f1: confusion.macro_f1(),
                confusion,
                test_samples: test.len(),
                history: out.history,
            },
        );
    }
    let aggregate_f1 = if per_user.is_empty() {
        0.0
    } else {
        per_user.values().map(|r| r.f1).sum::<f64>() / per_user.len() as f64
    };
    Ok(LouoRun {
        report: EvalReport {
            per_user,
            aggregate_f1,
            f1_averaging: "macro".into(),
            config_hash: fingerprint_hash(&learner.fingerprint()),
            seed,
            warnings,
        },
        params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSelection {
    pub held_out_user: String,
    /// (learning rate, held-out macro-F1) per candidate, in candidate order
    pub scores: Vec<(f64, f64)>,
    pub selected: f64,
}

/// Holds out the lexicographically first user, trains on the rest with each
/// candidate rate and returns the rate with the best held-out macro-F1
/// (smallest rate on ties).
pub fn select_learning_rate<L, F>(
    samples: &[PreprocessedSample],
    candidates: &[f64],
    num_classes: usize,
    mut make_learner: F,
    seed: u64,
) -> Result<LrSelection>
where
    L: FoldLearner,
    F: FnMut(f64) -> L,
{
    if candidates.is_empty() {
        return Err(Error::Config("no learning-rate candidates".into()));
    }
    let folds = louo_folds(samples, samples);
    if folds.len() < 2 {
        return Err(Error::Contract("learning-rate selection needs at least 2 users".into()));
    }
    let fold = &folds[0];
    let train: Vec<&PreprocessedSample> = fold.train.iter().map(|&i| &samples[i]).collect();
    let test: Vec<&PreprocessedSample> = fold.test.iter().map(|&i| &samples[i]).collect();
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    let mut scores = Vec::with_capacity(candidates.len());
    for &lr in candidates {
        let out = make_learner(lr).fit_predict(&train, &test, seed)?;
        let f1 = Confusion::from_labels(&out.predictions, &truth, num_classes)?.macro_f1();
        log::info!("learning rate {lr}: held-out macro-F1 {f1:.4}");
        scores.push((lr, f1));
    }
    let selected = scores
        .iter()
        .copied()
        .fold(None::<(f64, f64)>, |best, (lr, f1)| match best {
            Some((blr, bf1)) if bf1 > f1 || (bf1 == f1 && blr <= lr) => Some((blr, bf1)),
            _ => Some((lr, f1)),
        })
        .map(|(lr, _)| lr)
        .expect("non-empty candidates");
    Ok(LrSelection {
        held_out_user: fold.user_id.clone(),
        scores,
        selected,
    })
}
