//! Every differentiable primitive against central differences, plus
//! property checks of the engine invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trasend_autodiff::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn every_primitive_matches_central_differences() {
    let checks = primitive_gradchecks(POINTS, EPS).unwrap();
    assert!(checks.len() >= 30);
    for c in &checks {
        assert!(c.max_rel_error < TOL, "{}: max rel error {}", c.name, c.max_rel_error);
    }
}

#[test]
fn gradcheck_flags_a_wrong_gradient() {
    // relu's subgradient at a kink is not a derivative: x = 0 exactly
    let report = gradcheck(
        |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum_all(y))
        },
        &[Tensor::zeros(&[3])],
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error > 0.1);
}

#[test]
fn unused_parameter_gets_exact_zero() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::ones(&[2]), ParamGroup::FeatureExtractor, true).unwrap();
    let unused = store.add("unused", Tensor::ones(&[3, 2]), ParamGroup::OutputLayer, true).unwrap();
    let mut t = Tape::new();
    let u = t.param(&store, used);
    let _dangling = t.param(&store, unused);
    let loss = t.sum_all(u);
    let g = t.backward_params(loss, &store).unwrap();
    assert_eq!(g.get(unused), &Tensor::zeros(&[3, 2]));
    assert!(g.get(unused).data().iter().all(|v| v.to_bits() == 0));
    assert_eq!(g.get(used).shape(), &[2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-scale..scale));
        let mut t = Tape::new();
        let v = t.leaf(x);
        let y = t.softmax(v, 1).unwrap();
        for row in t.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn valid_conv_width_law(w in 1usize..80, k in 1usize..20, s in 1usize..8) {
        prop_assume!(k <= w);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 1, w, 1]));
        let f = t.leaf(Tensor::zeros(&[1, k, 1, 1]));
        let y = t.conv2d(x, f, (1, s), Padding::Valid).unwrap();
        prop_assert_eq!(t.shape(y)[2], (w - k) / s + 1);
    }

    #[test]
    fn adam_zero_gradient_is_bitwise_noop(values in proptest::collection::vec(-1e3f64..1e3, 1..10), lr in 1e-5f64..1.0) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(&values), ParamGroup::FeatureExtractor, true).unwrap();
        let before = store.value(id).clone();
        let mut t = Tape::new();
        let p = t.param(&store, id);
        let z = t.scale(p, 0.0);
        let loss = t.sum_all(z);
        let g = t.backward_params(loss, &store).unwrap();
        let mut adam = Adam::new(AdamConfig::standard(lr));
        for _ in 0..3 {
            adam.step(&mut store, &g).unwrap();
        }
        prop_assert!(store.value(id).bitwise_eq(&before));
    }

    #[test]
    fn eval_normalizers_are_idempotent(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 2], &mut rng);
        let stats = RunningStats { mean: vec![0.1, 0.2], var: vec![1.1, 0.9] };
        let mut t = Tape::new();
        let v = t.leaf(x);
        let g = t.constant(Tensor::ones(&[2]));
        let b = t.constant(Tensor::zeros(&[2]));
        let (a, _) = t.batch_norm(v, g, b, &stats, Mode::Eval, 1e-5).unwrap();
        let (c, _) = t.batch_norm(v, g, b, &stats, Mode::Eval, 1e-5).unwrap();
        prop_assert!(t.value(a).bitwise_eq(t.value(c)));
        let d1 = t.dropout(v, 0.4, Mode::Eval, &mut rng).unwrap();
        let d2 = t.dropout(d1, 0.4, Mode::Eval, &mut rng).unwrap();
        prop_assert!(t.value(d2).bitwise_eq(t.value(v)));
    }
}
