//! Confusion matrices and macro-averaged F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]` = number of samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_labels(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let mut m = Self::new(classes);
        for (&p, &t) in pred.iter().zip(truth) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || pred >= c {
            return Err(Error::Contract(format!(
                "label pair (truth {truth}, prediction {pred}) outside [0, {c})"
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Per-class F1. A class with no true positives, including one absent
    /// from both predictions and truth, scores 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        let c = self.classes();
        (0..c)
            .map(|k| {
                let tp = self.counts[k][k] as f64;
                let actual: u64 = self.counts[k].iter().sum();
                let predicted: u64 = (0..c).map(|t| self.counts[t][k]).sum();
                // 2PR/(P+R) = 2tp / (actual + predicted), with 0 when tp = 0.
                if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (actual + predicted) as f64
                }
            })
            .collect()
    }

    /// Unweighted mean of the per-class F1 over all classes.
    pub fn macro_f1(&self) -> f64 {
        let f = self.per_class_f1();
        if f.is_empty() {
            return 0.0;
        }
        f.iter().sum::<f64>() / f.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes()).map(|k| self.counts[k][k]).sum::<u64>() as f64 / total as f64
    }
}

/// Macro-averaged F1 of `pred` against `truth` over `classes` classes.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    Ok(Confusion::from_labels(pred, truth, classes)?.macro_f1())
}
