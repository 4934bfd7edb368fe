//! Output-layer adaptation to one user with the feature extractor frozen.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trasend_autodiff::{one_hot, Adam, AdamConfig, Mode, ParamGroup, ParamStore, Reduction, Tape, Tensor};

use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::model::{argmax_rows, Model, Pass};
use crate::preprocess::{PreprocessedSample, Origin};
use crate::train::{batch_inputs, evaluate, train, TrainConfig};

/// Indices (into the input slice) of the two halves of a user's data.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserSplit {
    pub adaptation: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Splits each activity's samples by time: the earlier half (plus the odd
/// sample) for adaptation, the later half for testing. Activities with fewer
/// than two samples are excluded. Adaptation indices come out in time order
/// across activities.
pub fn split_user_data(samples: &[&PreprocessedSample]) -> UserSplit {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut split = UserSplit::default();
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            split
                .warnings
                .push(format!("activity {class} has {} sample(s); excluded from the split", idx.len()));
            continue;
        }
        idx.sort_by(|&a, &b| samples[a].start.total_cmp(&samples[b].start).then(a.cmp(&b)));
        let n_adapt = idx.len().div_ceil(2);
        split.adaptation.extend_from_slice(&idx[..n_adapt]);
        split.test.extend_from_slice(&idx[n_adapt..]);
    }
    let by_time = |a: &usize, b: &usize| samples[*a].start.total_cmp(&samples[*b].start).then(a.cmp(b));
    split.adaptation.sort_by(by_time);
    split.test.sort_by(by_time);
    split
}

/// What happened to one feedback event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Prediction made before the update.
    pub predicted: usize,
    pub label: usize,
    /// Cross-entropy of the sample before the update.
    pub loss: f64,
}

/// Adapts the output layer of one model to a stream of labelled samples.
pub struct PersonalizationSession<'m> {
    model: &'m Model,
    params: ParamStore,
    adam: Adam,
    steps: usize,
    correct: usize,
}

impl<'m> PersonalizationSession<'m> {
    pub fn new(model: &'m Model, params: ParamStore, config: AdamConfig) -> Result<Self> {
        model.check_params(&params)?;
        Ok(Self {
            model,
            params,
            adam: Adam::new(config),
            steps: 0,
            correct: 0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Events processed so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Fraction of events predicted correctly before their update.
    pub fn prequential_accuracy(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.correct as f64 / self.steps as f64)
    }

    /// Frozen-extractor features of `samples`.
    pub fn features(&self, samples: &[&PreprocessedSample]) -> Result<Tensor> {
        self.model.features(&self.params, &batch_inputs(samples)?)
    }

    /// Output-layer logits and cross-entropy on the tape for one feature row.
    fn head_loss(&self, tape: &mut Tape, features: &Tensor, label: usize) -> Result<(trasend_autodiff::Var, trasend_autodiff::Var)> {
        let targets = one_hot(&[label], self.model.config().num_classes)?;
        let f = tape.constant(features.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass = Pass::new(tape, &self.params, Mode::Eval, &mut rng).freeze_features();
        let logits = self.model.head(&mut pass, f)?;
        let loss = tape.softmax_cross_entropy(logits, &targets, Reduction::Sum)?;
        Ok((logits, loss))
    }

    /// Cross-entropy of one sample under the current parameters.
    pub fn loss(&self, sample: &PreprocessedSample, label: usize) -> Result<f64> {
        self.check_label(label)?;
        let features = self.features(&[sample])?;
        let mut tape = Tape::new();
        let (_, loss) = self.head_loss(&mut tape, &features, label)?;
        Ok(tape.value(loss).item()?)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        let c = self.model.config().num_classes;
        if label >= c {
            return Err(Error::Contract(format!("label {label} outside [0, {c})")));
        }
        Ok(())
    }

    /// Predicts `sample`, then takes one Adam step on the output layer using
    /// its cross-entropy. An out-of-range label is rejected without touching
    /// the session.
    pub fn adapt_step(&mut self, sample: &PreprocessedSample, label: usize) -> Result<StepRecord> {
        self.check_label(label)?;
        let features = self.features(&[sample])?;
        self.adapt_features(&features, label)
    }

    /// [`Self::adapt_step`] for a precomputed `1 × head_input` feature row.
    pub fn adapt_features(&mut self, features: &Tensor, label: usize) -> Result<StepRecord> {
        self.check_label(label)?;
        let mut tape = Tape::new();
        let (logits, loss) = self.head_loss(&mut tape, features, label)?;
        let predicted = argmax_rows(tape.value(logits))[0];
        let loss_value = tape.value(loss).item()?;
        let grads = tape.backward_params(loss, &self.params)?;
        self.adam.step_group(&mut self.params, &grads, ParamGroup::OutputLayer)?;
        self.steps += 1;
        if predicted == label {
            self.correct += 1;
        }
        Ok(StepRecord {
            predicted,
            label,
            loss: loss_value,
        })
    }

    pub fn evaluate(&self, samples: &[&PreprocessedSample]) -> Result<Confusion> {
        evaluate(self.model, &self.params, samples)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub user_id: String,
    pub f1_before: f64,
    pub f1_after: f64,
    pub adaptation_samples: usize,
    pub test_samples: usize,
    pub prequential_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

/// Real samples of one user in time order; `sample_ref` in feedback events
/// indexes this list.
pub fn user_timeline<'a>(user_samples: &[&'a PreprocessedSample]) -> Vec<&'a PreprocessedSample> {
    let mut real: Vec<&PreprocessedSample> = user_samples.iter().copied().filter(|s| s.origin == Origin::Real).collect();
    real.sort_by(|a, b| a.start.total_cmp(&b.start));
    real
}

/// Scores the test half before and after replaying the adaptation half,
/// in time order, through a fresh session.
pub fn personalize_run(
    model: &Model,
    params: &ParamStore,
    user_samples: &[&PreprocessedSample],
    adam: AdamConfig,
) -> Result<(PersonalizationReport, ParamStore)> {
    let events = adaptation_events(user_samples);
    personalize_from_events(model, params, user_samples, &events, adam)
}

/// Like [`personalize_run`], but the adaptation updates come from `events`,
/// applied in the given order with the labels they carry. Events that point
/// into the test half are skipped with a warning.
pub fn personalize_from_events(
    model: &Model,
    params: &ParamStore,
    user_samples: &[&PreprocessedSample],
    events: &[FeedbackEvent],
    adam: AdamConfig,
) -> Result<(PersonalizationReport, ParamStore)> {
    let real = user_timeline(user_samples);
    let user_id = real.first().map(|s| s.user_id.clone()).unwrap_or_default();
    let split = split_user_data(&real);
    let mut warnings = split.warnings.clone();
    let test: Vec<&PreprocessedSample> = split.test.iter().map(|&i| real[i]).collect();
    if test.is_empty() {
        return Err(Error::Contract(format!("user {user_id:?} has no test samples after the split")));
    }
    let c = model.config().num_classes;
    if let Some(e) = events.iter().find(|e| e.sample_ref >= real.len() || e.label >= c) {
        return Err(Error::Contract(format!(
            "feedback event refers to sample {} with label {} ({} samples, {c} classes)",
            e.sample_ref,
            e.label,
            real.len()
        )));
    }
    let mut adapt = Vec::with_capacity(events.len());
    for e in events {
        if split.test.contains(&e.sample_ref) {
            warnings.push(format!("event for test sample {} skipped", e.sample_ref));
        } else {
            adapt.push((real[e.sample_ref], e.label));
        }
    }
    let mut session = PersonalizationSession::new(model, params.clone(), adam)?;
    let f1_before = session.evaluate(&test)?.macro_f1();
    let f1_after = if adapt.is_empty() {
        warnings.push("no adaptation events; no update performed".into());
        f1_before
    } else {
        let samples: Vec<&PreprocessedSample> = adapt.iter().map(|(s, _)| *s).collect();
        let feats = session.features(&samples)?;
        let width = feats.shape()[1];
        for (k, (_, label)) in adapt.iter().enumerate() {
            let row = Tensor::new(vec![1, width], feats.data()[k * width..(k + 1) * width].to_vec())?;
            session.adapt_features(&row, *label)?;
        }
        session.evaluate(&test)?.macro_f1()
    };
    let report = PersonalizationReport {
        user_id,
        f1_before,
        f1_after,
        adaptation_samples: adapt.len(),
        test_samples: test.len(),
        prequential_accuracy: session.prequential_accuracy(),
        warnings,
    };
    Ok((report, session.into_params()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutedLabelReport {
    pub user_id: String,
    pub f1_random_train: f64,
    pub f1_after_personalization: f64,
}

/// Trains on `train_set` with its labels randomly shuffled among samples,
/// scores the target user's test half, then personalizes on the correctly
/// labelled adaptation half and scores again.
pub fn permuted_label_validation(
    model: &Model,
    train_set: &[&PreprocessedSample],
    target: &[&PreprocessedSample],
    config: &TrainConfig,
    adam: AdamConfig,
    seed: u64,
) -> Result<PermutedLabelReport> {
    let mut labels: Vec<usize> = train_set.iter().map(|s| s.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let permuted: Vec<PreprocessedSample> = train_set
        .iter()
        .zip(labels)
        .map(|(s, label)| PreprocessedSample { label, ..(*s).clone() })
        .collect();
    let permuted_refs: Vec<&PreprocessedSample> = permuted.iter().collect();
    let init = model.init_params(seed)?;
    let outcome = train(model, init, &permuted_refs, &[], config)?;
    let (report, _) = personalize_run(model, &outcome.params, target, adam)?;
    Ok(PermutedLabelReport {
        user_id: report.user_id,
        f1_random_train: report.f1_before,
        f1_after_personalization: report.f1_after,
    })
}

/// One line of a feedback event file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackEvent {
    /// Index into the user's samples in time order.
    pub sample_ref: usize,
    pub label: usize,
    pub timestamp: f64,
}

/// Reads a JSON-lines event stream; blank lines are ignored.
pub fn read_events(path: &Path) -> Result<Vec<FeedbackEvent>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Data {
            file: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Events for the adaptation half of a user's samples, as `personalize_run`
/// replays them. `sample_ref` indexes [`user_timeline`].
pub fn adaptation_events(user_samples: &[&PreprocessedSample]) -> Vec<FeedbackEvent> {
    let real = user_timeline(user_samples);
    let split = split_user_data(&real);
    split
        .adaptation
        .iter()
        .map(|&i| FeedbackEvent {
            sample_ref: i,
            label: real[i].label,
            timestamp: real[i].start,
        })
        .collect()
}
