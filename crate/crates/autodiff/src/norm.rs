//! Layer and batch normalization.

use crate::error::{dim_err, shape_err, Error, Result};
use crate::tape::{Mode, Op, Tape, Var};
use crate::tensor::{axis_split, check_axis, Tensor};

pub(crate) struct NormGrads {
    pub dx: Tensor,
    pub dgain: Tensor,
    pub dbias: Tensor,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Statistics that have never been populated; eval mode rejects them.
    pub fn empty() -> Self {
        RunningStats {
            mean: Vec::new(),
            var: Vec::new(),
        }
    }

    pub fn initial(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Batch statistics computed by a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchMoments {
    /// Exponential moving average update: `running ← momentum·running + (1−momentum)·batch`.
    pub fn update(&self, stats: &mut RunningStats, momentum: f64) {
        if stats.is_empty() {
            stats.mean = self.mean.clone();
            stats.var = self.var.clone();
            return;
        }
        for (r, b) in stats.mean.iter_mut().zip(&self.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in stats.var.iter_mut().zip(&self.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Shared backward for normalizations of groups of `n` values:
/// `dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))`.
fn normalized_backward(
    dxhat: &[f64],
    xhat: &[f64],
    inv_std: f64,
    idx: impl Fn(usize) -> usize,
    n: usize,
    dx: &mut [f64],
) {
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in 0..n {
        let j = idx(i);
        s1 += dxhat[j];
        s2 += dxhat[j] * xhat[j];
    }
    let nf = n as f64;
    for i in 0..n {
        let j = idx(i);
        dx[j] = inv_std / nf * (nf * dxhat[j] - s1 - xhat[j] * s2);
    }
}

pub(crate) fn layer_norm_backward(
    gain: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    g: &Tensor,
    axis: usize,
) -> NormGrads {
    let (outer, n, inner) = axis_split(g.shape(), axis);
    let gd = g.data();
    let gv = gain.data();
    let mut dxhat = vec![0.0; gd.len()];
    let mut dgain = vec![0.0; n];
    let mut dbias = vec![0.0; n];
    for o in 0..outer {
        for i in 0..n {
            for k in 0..inner {
                let j = (o * n + i) * inner + k;
                dxhat[j] = gd[j] * gv[i];
                dgain[i] += gd[j] * xhat[j];
                dbias[i] += gd[j];
            }
        }
    }
    let mut dx = vec![0.0; gd.len()];
    for o in 0..outer {
        for k in 0..inner {
            normalized_backward(
                &dxhat,
                xhat,
                inv_std[o * inner + k],
                |i| (o * n + i) * inner + k,
                n,
                &mut dx,
            );
        }
    }
    NormGrads {
        dx: Tensor::new(g.shape().to_vec(), dx).unwrap(),
        dgain: Tensor::new(vec![n], dgain).unwrap(),
        dbias: Tensor::new(vec![n], dbias).unwrap(),
    }
}

fn channel_sums(g: &[f64], xhat: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for (j, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
        dscale[j % c] += gv * xv;
        dshift[j % c] += gv;
    }
    (dscale, dshift)
}

pub(crate) fn batch_norm_train_backward(
    scale: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    g: &Tensor,
) -> NormGrads {
    let c = scale.len();
    let gd = g.data();
    let rows = gd.len() / c;
    let sv = scale.data();
    let dxhat: Vec<f64> = gd.iter().enumerate().map(|(j, v)| v * sv[j % c]).collect();
    let mut dx = vec![0.0; gd.len()];
    for ch in 0..c {
        normalized_backward(&dxhat, xhat, inv_std[ch], |r| r * c + ch, rows, &mut dx);
    }
    let (dscale, dshift) = channel_sums(gd, xhat, c);
    NormGrads {
        dx: Tensor::new(g.shape().to_vec(), dx).unwrap(),
        dgain: Tensor::new(vec![c], dscale).unwrap(),
        dbias: Tensor::new(vec![c], dshift).unwrap(),
    }
}

pub(crate) fn batch_norm_eval_backward(
    scale: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    g: &Tensor,
) -> NormGrads {
    let c = scale.len();
    let gd = g.data();
    let sv = scale.data();
    let dx = gd
        .iter()
        .enumerate()
        .map(|(j, v)| v * sv[j % c] * inv_std[j % c])
        .collect();
    let (dscale, dshift) = channel_sums(gd, xhat, c);
    NormGrads {
        dx: Tensor::new(g.shape().to_vec(), dx).unwrap(),
        dgain: Tensor::new(vec![c], dscale).unwrap(),
        dbias: Tensor::new(vec![c], dshift).unwrap(),
    }
}

impl Tape {
    /// Normalizes every slice along `axis` to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias` (both of the axis length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("layer_norm", &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return shape_err("layer_norm", self.shape(gain), &[n]);
        }
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| (o * n + i) * inner + k;
                let mean = (0..n).map(|i| src[at(i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (src[at(i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + k] = is;
                for i in 0..n {
                    let j = at(i);
                    xhat[j] = (src[j] - mean) * is;
                    out[j] = xhat[j] * gv[i] + bv[i];
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch normalization over every axis but the last (channel) axis.
    ///
    /// In [`Mode::Train`] the batch statistics are used and returned so the
    /// caller can fold them into its running statistics; in [`Mode::Eval`]
    /// `stats` is used and must be populated.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: &RunningStats,
        mode: Mode,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let shape = self.shape(x).to_vec();
        let Some(&c) = shape.last() else {
            return dim_err("batch_norm", "scalar input");
        };
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return shape_err("batch_norm", self.shape(scale), &[c]);
        }
        let src = self.value(x).data();
        let rows = src.len() / c;
        let (sv, bv) = (self.value(scale).data(), self.value(shift).data());
        let (mean, var, moments) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for (j, v) in src.iter().enumerate() {
                    mean[j % c] += v;
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for (j, v) in src.iter().enumerate() {
                    var[j % c] += (v - mean[j % c]).powi(2);
                }
                var.iter_mut().for_each(|m| *m /= rows as f64);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(moments))
            }
            Mode::Eval => {
                if stats.is_empty() {
                    return Err(Error::State(
                        "batch_norm in eval mode needs populated running statistics".into(),
                    ));
                }
                if stats.mean.len() != c || stats.var.len() != c {
                    return shape_err("batch_norm", &[stats.mean.len()], &[c]);
                }
                (stats.mean.clone(), stats.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = src
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean[j % c]) * inv_std[j % c])
            .collect();
        let out = xhat
            .iter()
            .enumerate()
            .map(|(j, v)| v * sv[j % c] + bv[j % c])
            .collect();
        let v = Tensor::new(shape, out)?;
        let op = match mode {
            Mode::Train => Op::BatchNormTrain {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            Mode::Eval => Op::BatchNormEval {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
        };
        Ok((self.push(v, op), moments))
    }
}
