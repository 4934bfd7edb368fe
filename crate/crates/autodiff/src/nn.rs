//! Softmax family, dropout and the GRU cell.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tape::{Mode, Op, Tape, Var};
use crate::tensor::{axis_split, check_axis, Tensor};

fn softmax_slices(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| (o * n + i) * inner + k;
            let max = (0..n).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|i| (src[at(i)] - max).exp()).sum();
            let log_sum = sum.ln();
            for i in 0..n {
                let shifted = src[at(i)] - max;
                out[at(i)] = if log {
                    shifted - log_sum
                } else {
                    shifted.exp() / sum
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![0.0; yd.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| (o * n + i) * inner + k;
            let dot: f64 = (0..n).map(|i| yd[at(i)] * gd[at(i)]).sum();
            for i in 0..n {
                dx[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

pub(crate) fn log_softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![0.0; yd.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| (o * n + i) * inner + k;
            let total: f64 = (0..n).map(|i| gd[at(i)]).sum();
            for i in 0..n {
                dx[at(i)] = gd[at(i)] - yd[at(i)].exp() * total;
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

pub(crate) fn softmax_ce_backward(probs: &[f64], targets: &Tensor, scale: f64) -> Tensor {
    let c = targets.shape()[1];
    let td = targets.data();
    let dx = probs
        .iter()
        .zip(td)
        .enumerate()
        .map(|(j, (p, t))| {
            let row = j / c;
            let mass: f64 = td[row * c..(row + 1) * c].iter().sum();
            scale * (p * mass - t)
        })
        .collect();
    Tensor::new(targets.shape().to_vec(), dx).unwrap()
}

/// How a per-sample loss is reduced over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Validates that every row of `targets` is one-hot.
pub fn check_one_hot(targets: &Tensor) -> Result<()> {
    if targets.rank() != 2 {
        return Err(Error::Contract(format!(
            "targets must be N×C, got {:?}",
            targets.shape()
        )));
    }
    let c = targets.shape()[1];
    for (i, row) in targets.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Contract(format!("target row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// One-hot encoding of class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Contract("no labels".into()));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Contract(format!("label {l} out of range for {classes} classes")));
        }
        t.set(&[i, l], 1.0);
    }
    Ok(t)
}

impl Tape {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(x), axis)?;
        let v = softmax_slices(self.value(x), axis, false);
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("log_softmax", self.shape(x), axis)?;
        let v = softmax_slices(self.value(x), axis, true);
        Ok(self.push(v, Op::LogSoftmax { x, axis }))
    }

    /// Cross-entropy `−Σ_i Σ_c t_ic · log softmax(logits)_ic`, evaluated
    /// through log-softmax of the logits. `targets` must be one-hot rows.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor,
        reduction: Reduction,
    ) -> Result<Var> {
        check_one_hot(targets)?;
        if self.shape(logits) != targets.shape() {
            return shape_err("softmax_cross_entropy", self.shape(logits), targets.shape());
        }
        let logp = softmax_slices(self.value(logits), 1, true);
        let total: f64 = -logp
            .data()
            .iter()
            .zip(targets.data())
            .map(|(l, t)| if *t == 0.0 { 0.0 } else { t * l })
            .sum::<f64>();
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / targets.shape()[0] as f64,
        };
        let probs = logp.data().iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.clone(),
                scale,
            },
        ))
    }

    /// Inverted dropout: in training each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1−p)`; evaluation is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { x, mask }))
    }
}

/// Tape handles of one GRU layer's weights.
///
/// Gate blocks are stacked along the column axis in the order
/// update (z), reset (r), candidate (h̃):
/// `w: dx × 3dh`, `u: dh × 3dh`, `b: 3dh`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

/// Recurrent weight slices reused across the timesteps of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct GruRecurrence {
    u_zr: Var,
    u_h: Var,
    hidden: usize,
}

impl GruRecurrence {
    pub fn new(tape: &mut Tape, weights: &GruWeights) -> Result<Self> {
        let us = tape.shape(weights.u).to_vec();
        if us.len() != 2 || us[1] != 3 * us[0] {
            return shape_err("gru", &us, &[us[0], 3 * us[0]]);
        }
        let hidden = us[0];
        let u_zr = tape.narrow(weights.u, 1, 0, 2 * hidden)?;
        let u_h = tape.narrow(weights.u, 1, 2 * hidden, hidden)?;
        Ok(GruRecurrence { u_zr, u_h, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One step given the input projection `x·W + b` (`n × 3dh`) and state `h`.
    ///
    /// z = σ(xW_z + hU_z + b_z), r = σ(xW_r + hU_r + b_r),
    /// h̃ = tanh(xW_h + (r⊙h)U_h + b_h), h' = (1−z)⊙h + z⊙h̃.
    pub fn step(&self, tape: &mut Tape, x_proj: Var, h: Var) -> Result<Var> {
        let dh = self.hidden;
        let xs = tape.shape(x_proj).to_vec();
        let hs = tape.shape(h).to_vec();
        if xs.len() != 2 || hs.len() != 2 || xs[1] != 3 * dh || hs[1] != dh || xs[0] != hs[0] {
            return shape_err("gru_cell", &xs, &hs);
        }
        let x_zr = tape.narrow(x_proj, 1, 0, 2 * dh)?;
        let x_h = tape.narrow(x_proj, 1, 2 * dh, dh)?;
        let h_zr = tape.matmul(h, self.u_zr)?;
        let pre_zr = tape.add(x_zr, h_zr)?;
        let zr = tape.sigmoid(pre_zr);
        let z = tape.narrow(zr, 1, 0, dh)?;
        let r = tape.narrow(zr, 1, dh, dh)?;
        let rh = tape.mul(r, h)?;
        let rh_u = tape.matmul(rh, self.u_h)?;
        let pre_h = tape.add(x_h, rh_u)?;
        let cand = tape.tanh(pre_h);
        // (1−z)⊙h + z⊙h̃ = h + z⊙(h̃ − h)
        let delta = tape.sub(cand, h)?;
        let zd = tape.mul(z, delta)?;
        tape.add(h, zd)
    }
}

impl Tape {
    /// Single GRU step for inputs `x: n×dx` and state `h: n×dh`.
    pub fn gru_cell(&mut self, x: Var, h: Var, weights: &GruWeights) -> Result<Var> {
        let ws = self.shape(weights.w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.len() != 2 || ws[0] != xs[1] {
            return shape_err("gru_cell", &xs, &ws);
        }
        let rec = GruRecurrence::new(self, weights)?;
        if ws[1] != 3 * rec.hidden() {
            return shape_err("gru_cell", &ws, &[xs[1], 3 * rec.hidden()]);
        }
        let proj = self.dense(x, weights.w, weights.b)?;
        rec.step(self, proj, h)
    }
}
