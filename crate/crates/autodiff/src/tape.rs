//! Gradient tape: records primitives during the forward pass and replays
//! them in reverse to accumulate gradients.

use std::collections::HashMap;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic and statistics-tracking layers run in training form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        patches: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Tensor,
        scale: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
///
/// Node indices are assigned in execution order, so reverse index order is a
/// reverse topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Param(_) => true,
            op => op_inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter of `store`; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Like [`Tape::param`] but recorded as a constant (no gradient flows to it).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.constant(store.value(id).clone());
        self.param_vars.insert(id, v);
        v
    }

    /// Reverse pass from a scalar `loss`, returning the gradient of every
    /// recorded value that influences it.
    pub fn backward(&self, loss: Var) -> Result<VarGrads> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                for (input, gi) in self.input_grads(idx, &g) {
                    accumulate(&mut grads[input.0], gi);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(VarGrads { grads })
    }

    /// Reverse pass returning one gradient per parameter of `store`.
    ///
    /// Parameters that were never recorded, or that do not influence `loss`,
    /// get an exactly-zero gradient of their own shape.
    pub fn backward_params(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let var_grads = self.backward(loss)?;
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &var_grads.grads[idx] {
                    out[id.0].add_assign(g);
                }
            }
        }
        let names = store.iter().map(|(_, p)| p.name().to_string()).collect();
        Ok(Gradients::new(names, out))
    }

    fn input_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut res = Vec::new();
        let mut emit = |v: Var, f: &mut dyn FnMut() -> Tensor| {
            if self.nodes[v.0].requires_grad {
                res.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                emit(*a, &mut || crate::ops::reduce_to(g, self.shape(*a)));
                emit(*b, &mut || crate::ops::reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                emit(*a, &mut || crate::ops::reduce_to(g, self.shape(*a)));
                emit(*b, &mut || crate::ops::reduce_to(&g.map(|v| -v), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                emit(*a, &mut || {
                    crate::ops::reduce_to(&crate::ops::broadcast_mul(g, vb), va.shape())
                });
                emit(*b, &mut || {
                    crate::ops::reduce_to(&crate::ops::broadcast_mul(g, va), vb.shape())
                });
            }
            Op::Scale(a, s) => emit(*a, &mut || g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                emit(*a, &mut || {
                    x.zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 }).unwrap()
                });
            }
            Op::Tanh(a) => emit(*a, &mut || out.zip_map(g, |y, gv| gv * (1.0 - y * y)).unwrap()),
            Op::Sigmoid(a) => emit(*a, &mut || out.zip_map(g, |y, gv| gv * y * (1.0 - y)).unwrap()),
            Op::MatMul { a, b, trans_b } => {
                let (ga, gb) = crate::ops::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    *trans_b,
                    g,
                    self.needs_grad(*a),
                    self.needs_grad(*b),
                );
                if let Some(ga) = ga {
                    res.push((*a, ga));
                }
                if let Some(gb) = gb {
                    res.push((*b, gb));
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                patches,
            } => {
                let (gx, gw) = crate::conv::conv2d_backward(
                    geom,
                    patches,
                    self.value(*w),
                    g,
                    self.needs_grad(*x),
                    self.needs_grad(*w),
                );
                if let Some(gx) = gx {
                    res.push((*x, gx));
                }
                if let Some(gw) = gw {
                    res.push((*w, gw));
                }
            }
            Op::Softmax { x, axis } => {
                emit(*x, &mut || crate::nn::softmax_backward(out, g, *axis));
            }
            Op::LogSoftmax { x, axis } => {
                emit(*x, &mut || crate::nn::log_softmax_backward(out, g, *axis));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let grads = crate::norm::layer_norm_backward(
                    self.value(*gain),
                    xhat,
                    inv_std,
                    g,
                    *axis,
                );
                if self.needs_grad(*x) {
                    res.push((*x, grads.dx));
                }
                if self.needs_grad(*gain) {
                    res.push((*gain, grads.dgain));
                }
                if self.needs_grad(*bias) {
                    res.push((*bias, grads.dbias));
                }
            }
            Op::BatchNormTrain {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let grads =
                    crate::norm::batch_norm_train_backward(self.value(*scale), xhat, inv_std, g);
                if self.needs_grad(*x) {
                    res.push((*x, grads.dx));
                }
                if self.needs_grad(*scale) {
                    res.push((*scale, grads.dgain));
                }
                if self.needs_grad(*shift) {
                    res.push((*shift, grads.dbias));
                }
            }
            Op::BatchNormEval {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let grads =
                    crate::norm::batch_norm_eval_backward(self.value(*scale), xhat, inv_std, g);
                if self.needs_grad(*x) {
                    res.push((*x, grads.dx));
                }
                if self.needs_grad(*scale) {
                    res.push((*scale, grads.dgain));
                }
                if self.needs_grad(*shift) {
                    res.push((*shift, grads.dbias));
                }
            }
            Op::Dropout { x, mask } => {
                emit(*x, &mut || {
                    let data = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                    Tensor::new(g.shape().to_vec(), data).unwrap()
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                emit(*x, &mut || g.clone().reshape(&shape).unwrap());
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                emit(*x, &mut || crate::ops::permute_tensor(g, &inverse));
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    emit(*v, &mut || crate::ops::narrow_tensor(g, *axis, start, len));
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                emit(*x, &mut || crate::ops::narrow_backward(g, &shape, *axis, *start));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                emit(*x, &mut || crate::ops::mean_axis_backward(g, &shape, *axis));
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                let gv = g.data()[0];
                emit(*x, &mut || Tensor::full(&shape, gv));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                scale,
            } => {
                let gv = g.data()[0] * scale;
                emit(*logits, &mut || {
                    crate::nn::softmax_ce_backward(probs, targets, gv)
                });
            }
        }
        res
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Relu(a) | Op::Tanh(a) | Op::Sigmoid(a) => vec![*a],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::Softmax { x, .. } | Op::LogSoftmax { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::BatchNormTrain { x, scale, shift, .. } | Op::BatchNormEval { x, scale, shift, .. } => {
            vec![*x, *scale, *shift]
        }
        Op::Dropout { x, .. } => vec![*x],
        Op::Reshape(x) | Op::SumAll(x) => vec![*x],
        Op::Permute { x, .. } | Op::Narrow { x, .. } | Op::MeanAxis { x, .. } => vec![*x],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}

/// Gradients of all recorded values with respect to one scalar.
pub struct VarGrads {
    grads: Vec<Option<Tensor>>,
}

impl VarGrads {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
