//! Primitive outputs checked against independent direct-formula oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trasend_autodiff::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn elementwise_definitions() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(&[-1.0, 0.0, 2.0]));
    let r = t.relu(x);
    let th = t.tanh(x);
    let s = t.sigmoid(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(t.value(th).data()[1], 0.0);
    assert_eq!(t.value(s).data()[1], 0.5);
}

#[test]
fn dense_identity_and_bias() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::identity(2));
    let w = t.leaf(Tensor::identity(2));
    let b = t.leaf(Tensor::zeros(&[2]));
    let y = t.dense(x, w, b).unwrap();
    assert_eq!(t.value(y), &Tensor::identity(2));

    let x = t.leaf(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
    let w = t.leaf(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
    let b = t.leaf(Tensor::vector(&[3.0]));
    let y = t.dense(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[6.0]);
}

#[test]
fn dense_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (xv, wv, bv) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng));
    let mut t = Tape::new();
    let (x, w, b) = (t.leaf(xv.clone()), t.leaf(wv.clone()), t.leaf(bv.clone()));
    let y = t.dense(x, w, b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = bv.at(&[j]);
            for k in 0..4 {
                acc += xv.at(&[i, k]) * wv.at(&[k, j]);
            }
            assert!((t.value(y).at(&[i, j]) - acc).abs() < 1e-12);
        }
    }
}

fn conv_oracle(x: &Tensor, f: &Tensor, stride: (usize, usize), pad: (usize, usize), out: (usize, usize)) -> Tensor {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (f.shape()[0], f.shape()[1], f.shape()[3]);
    let mut y = Tensor::zeros(&[n, out.0, out.1, cout]);
    for b in 0..n {
        for oy in 0..out.0 {
            for ox in 0..out.1 {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                            let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[b, iy as usize, ix as usize, ci]) * f.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    y.set(&[b, oy, ox, co], acc);
                }
            }
        }
    }
    y
}

#[test]
fn conv_valid_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = random(&[1, 20, 60, 1], &mut rng);
    let fv = random(&[1, 18, 1, 4], &mut rng);
    for stride in [(1, 1), (1, 6)] {
        let mut t = Tape::new();
        let (x, f) = (t.leaf(xv.clone()), t.leaf(fv.clone()));
        let y = t.conv2d(x, f, stride, Padding::Valid).unwrap();
        let ow = (60 - 18) / stride.1 + 1;
        assert_eq!(t.shape(y), &[1, 20, ow, 4]);
        let want = conv_oracle(&xv, &fv, stride, (0, 0), (20, ow));
        assert!(t.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn conv_same_matches_padded_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = random(&[2, 2, 4, 3], &mut rng);
    let fv = random(&[2, 8, 3, 5], &mut rng);
    let mut t = Tape::new();
    let (x, f) = (t.leaf(xv.clone()), t.leaf(fv.clone()));
    let y = t.conv2d(x, f, (1, 1), Padding::Same).unwrap();
    assert_eq!(t.shape(y), &[2, 2, 4, 5]);
    let want = conv_oracle(&xv, &fv, (1, 1), (0, 3), (2, 4));
    assert!(t.value(y).max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn conv_width_example() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 1, 60, 1]));
    let f = t.leaf(Tensor::zeros(&[1, 18, 1, 2]));
    let y = t.conv2d(x, f, (1, 6), Padding::Valid).unwrap();
    assert_eq!(t.shape(y)[2], 8);
    let big = t.leaf(Tensor::zeros(&[1, 1, 70, 1]));
    assert!(t.conv2d(x, big, (1, 1), Padding::Valid).is_err());
}

/// Softmax evaluated without max subtraction, with compensated summation.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for e in &exps {
        let y = e - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    exps.iter().map(|e| e / sum).collect()
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xv = Tensor::from_fn(&[5], |_| rng.random_range(-3.0..3.0));
    let mut t = Tape::new();
    let x = t.leaf(xv.clone());
    let y = t.softmax(x, 0).unwrap();
    for (a, b) in t.value(y).data().iter().zip(softmax_oracle(xv.data())) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv = Tensor::from_fn(&[1, 64], |_| rng.random_range(-5.0..5.0));
    let mut t = Tape::new();
    let x = t.leaf(xv);
    let g = t.constant(Tensor::ones(&[64]));
    let b = t.constant(Tensor::zeros(&[64]));
    let y = t.layer_norm(x, g, b, 1, 1e-12).unwrap();
    let d = t.value(y).data();
    let mean = d.iter().sum::<f64>() / 64.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn batch_norm_eval_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xv = random(&[4, 3], &mut rng);
    let stats = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
    };
    let (scale, shift) = ([1.5, -0.5, 2.0], [0.1, 0.2, 0.3]);
    let eps = 1e-3;
    let mut t = Tape::new();
    let x = t.leaf(xv.clone());
    let s = t.leaf(Tensor::vector(&scale));
    let b = t.leaf(Tensor::vector(&shift));
    let (y, moments) = t.batch_norm(x, s, b, &stats, Mode::Eval, eps).unwrap();
    assert!(moments.is_none());
    for i in 0..4 {
        for c in 0..3 {
            let want = (xv.at(&[i, c]) - stats.mean[c]) / (stats.var[c] + eps).sqrt() * scale[c] + shift[c];
            assert!((t.value(y).at(&[i, c]) - want).abs() < 1e-12);
        }
    }
    // eval mode is deterministic
    let (y2, _) = t.batch_norm(x, s, b, &stats, Mode::Eval, eps).unwrap();
    assert!(t.value(y).bitwise_eq(t.value(y2)));
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = Tape::new();
    let xv = random(&[10], &mut rng);
    let x = t.leaf(xv.clone());
    let e = t.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(t.value(e), &xv);
    let z = t.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(t.value(z), &xv);

    let ones = t.leaf(Tensor::ones(&[100_000]));
    let d = t.dropout(ones, 0.5, Mode::Train, &mut rng).unwrap();
    let mean = t.value(d).sum() / 100_000.0;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    assert!(t.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn gru_cell_matches_scalar_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, dx, dh) = (2, 3, 2);
    let (xv, hv) = (random(&[n, dx], &mut rng), random(&[n, dh], &mut rng));
    let (wv, uv, bv) = (random(&[dx, 3 * dh], &mut rng), random(&[dh, 3 * dh], &mut rng), random(&[3 * dh], &mut rng));
    let mut t = Tape::new();
    let (x, h) = (t.leaf(xv.clone()), t.leaf(hv.clone()));
    let weights = GruWeights {
        w: t.leaf(wv.clone()),
        u: t.leaf(uv.clone()),
        b: t.leaf(bv.clone()),
    };
    let out = t.gru_cell(x, h, &weights).unwrap();
    for s in 0..n {
        // gate pre-activations, block g ∈ {z, r, h̃}
        let xw = |g: usize, j: usize| (0..dx).map(|k| xv.at(&[s, k]) * wv.at(&[k, g * dh + j])).sum::<f64>();
        let hu = |g: usize, j: usize, hvec: &[f64]| (0..dh).map(|k| hvec[k] * uv.at(&[k, g * dh + j])).sum::<f64>();
        let hrow: Vec<f64> = (0..dh).map(|j| hv.at(&[s, j])).collect();
        let z: Vec<f64> = (0..dh).map(|j| sig(xw(0, j) + hu(0, j, &hrow) + bv.at(&[j]))).collect();
        let r: Vec<f64> = (0..dh).map(|j| sig(xw(1, j) + hu(1, j, &hrow) + bv.at(&[dh + j]))).collect();
        let rh: Vec<f64> = (0..dh).map(|j| r[j] * hrow[j]).collect();
        for j in 0..dh {
            let cand = (xw(2, j) + hu(2, j, &rh) + bv.at(&[2 * dh + j])).tanh();
            let want = (1.0 - z[j]) * hrow[j] + z[j] * cand;
            assert!((t.value(out).at(&[s, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn gru_zero_everything_is_fixed_point() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 3]));
    let h = t.leaf(Tensor::zeros(&[1, 2]));
    let weights = GruWeights {
        w: t.leaf(Tensor::zeros(&[3, 6])),
        u: t.leaf(Tensor::zeros(&[2, 6])),
        b: t.leaf(Tensor::zeros(&[6])),
    };
    let out = t.gru_cell(x, h, &weights).unwrap();
    assert!(t.value(out).data().iter().all(|&v| v == 0.0));
}

fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, v) in values {
        s.add(*name, v.clone(), ParamGroup::FeatureExtractor, true).unwrap();
    }
    s
}

#[test]
fn backward_linear_and_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let wv = random(&[3, 2], &mut rng);
    let store = store_with(&[("w", wv.clone())]);
    let id = store.id("w").unwrap();

    let mut t = Tape::new();
    let w = t.param(&store, id);
    let loss = t.sum_all(w);
    let g = t.backward_params(loss, &store).unwrap();
    assert_eq!(g.by_name("w").unwrap(), &Tensor::ones(&[3, 2]));

    let mut t = Tape::new();
    let w = t.param(&store, id);
    let sq = t.mul(w, w).unwrap();
    let s = t.sum_all(sq);
    let loss = t.scale(s, 0.5);
    let g = t.backward_params(loss, &store).unwrap();
    assert!(g.get(id).max_abs_diff(&wv).unwrap() < 1e-15);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn composite_graph_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let store = store_with(&[
        ("conv", random(&[1, 3, 1, 2], &mut rng)),
        ("w", random(&[8, 3], &mut rng)),
        ("b", random(&[3], &mut rng)),
    ]);
    let input = random(&[2, 1, 6, 1], &mut rng);
    let targets = one_hot(&[0, 2], 3).unwrap();
    let report = gradcheck_params(
        |t, s| {
            let x = t.constant(input.clone());
            let f = t.param(s, s.id("conv").unwrap());
            let y = t.conv2d(x, f, (1, 1), Padding::Valid)?;
            let y = t.relu(y);
            let y = t.reshape(y, &[2, 8])?;
            let (w, b) = (t.param(s, s.id("w").unwrap()), t.param(s, s.id("b").unwrap()));
            let logits = t.dense(y, w, b)?;
            t.softmax_cross_entropy(logits, &targets, Reduction::Sum)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn gradcheck_exact_on_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let report = gradcheck(|t, v| Ok(t.sum_all(v[0])), &[random(&[4, 3], &mut rng)], 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-10);
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let targets = one_hot(&[1, 0, 3], 4).unwrap();
    let report = gradcheck(
        |t, v| t.softmax_cross_entropy(v[0], &targets, Reduction::Sum),
        &[random(&[3, 4], &mut rng)],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn cross_entropy_values() {
    let mut t = Tape::new();
    let logits = t.leaf(Tensor::zeros(&[1, 6]));
    let truth = one_hot(&[2], 6).unwrap();
    let loss = t.softmax_cross_entropy(logits, &truth, Reduction::Sum).unwrap();
    assert!((t.value(loss).item().unwrap() - 6f64.ln()).abs() < 1e-12);
}

/// Independent scalar Adam used as the reference trace.
fn scalar_adam(theta0: f64, grad: impl Fn(f64) -> f64, steps: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut trace = Vec::new();
    for t in 1..=steps {
        let g = grad(theta);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        theta -= lr * mh / (vh.sqrt() + eps);
        trace.push(theta);
    }
    trace
}

#[test]
fn adam_matches_scalar_trace() {
    let mut store = store_with(&[("theta", Tensor::vector(&[1.0]))]);
    let id = store.id("theta").unwrap();
    let mut adam = Adam::new(AdamConfig::standard(0.1));
    let mut trace = Vec::new();
    for _ in 0..3 {
        let mut t = Tape::new();
        let th = t.param(&store, id);
        let sq = t.mul(th, th).unwrap();
        let loss = t.sum_all(sq);
        let g = t.backward_params(loss, &store).unwrap();
        adam.step(&mut store, &g).unwrap();
        trace.push(store.value(id).data()[0]);
    }
    assert_eq!(adam.state().step_count(), 3);
    let want = scalar_adam(1.0, |x| 2.0 * x, 3, 0.1, 0.9, 0.999, 1e-8);
    for (a, b) in trace.iter().zip(&want) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn adam_first_step_magnitude() {
    let mut store = store_with(&[("theta", Tensor::vector(&[0.0]))]);
    let id = store.id("theta").unwrap();
    let mut adam = Adam::new(AdamConfig::standard(0.001));
    let mut t = Tape::new();
    let th = t.param(&store, id);
    let loss = t.scale(th, 2.0);
    let loss = t.sum_all(loss);
    let g = t.backward_params(loss, &store).unwrap();
    adam.step(&mut store, &g).unwrap();
    assert!((store.value(id).data()[0] + 0.001).abs() < 1e-9);
}

#[test]
fn adam_rejects_nan_without_mutation() {
    let mut store = store_with(&[("a", Tensor::vector(&[1.0])), ("b", Tensor::vector(&[2.0]))]);
    let before = store.clone();
    let mut t = Tape::new();
    let a = t.param(&store, ParamId(0));
    let b = t.param(&store, ParamId(1));
    let nan = t.constant(Tensor::vector(&[f64::NAN]));
    let bn = t.mul(b, nan).unwrap();
    let s = t.add(a, bn).unwrap();
    let loss = t.sum_all(s);
    let g = t.backward_params(loss, &store).unwrap();
    let mut adam = Adam::new(AdamConfig::standard(0.01));
    assert!(matches!(adam.step(&mut store, &g), Err(Error::Numeric(_))));
    assert_eq!(store, before);
    assert_eq!(adam.state().step_count(), 0);
}
