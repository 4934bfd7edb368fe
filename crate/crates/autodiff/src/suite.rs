//! Central-difference checks of every differentiable primitive, each at
//! several random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::Padding;
use crate::error::Result;
use crate::gradcheck::gradcheck;
use crate::nn::{one_hot, GruWeights, Reduction};
use crate::norm::RunningStats;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error of one primitive over all evaluation points.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    (name, shapes.iter().map(|s| s.to_vec()).collect(), Box::new(f))
}

fn cases() -> Result<Vec<Case>> {
    let targets = one_hot(&[0, 3, 1], 4)?;
    let stats = RunningStats {
        mean: vec![0.2, -0.1, 0.0],
        var: vec![0.7, 1.3, 0.9],
    };
    Ok(vec![
        case("add", &[&[3, 4], &[4]], |t, v| t.add(v[0], v[1])),
        case("add_mid_broadcast", &[&[2, 3, 4], &[2, 1, 4]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 1]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[1, 4]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v| Ok(t.scale(v[0], -2.5))),
        case("relu", &[&[4, 5]], |t, v| Ok(t.relu(v[0]))),
        case("tanh", &[&[4, 5]], |t, v| Ok(t.tanh(v[0]))),
        case("sigmoid", &[&[4, 5]], |t, v| Ok(t.sigmoid(v[0]))),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("matmul_rank3_shared", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("bmm_trans", &[&[2, 3, 4], &[2, 5, 4]], |t, v| t.matmul_ext(v[0], v[1], true)),
        case("dense", &[&[3, 4], &[4, 2], &[2]], |t, v| t.dense(v[0], v[1], v[2])),
        case("conv_valid_strided", &[&[2, 2, 12, 1], &[1, 6, 1, 3]], |t, v| {
            t.conv2d(v[0], v[1], (1, 2), Padding::Valid)
        }),
        case("conv_same", &[&[2, 2, 4, 3], &[2, 4, 3, 2]], |t, v| t.conv2d(v[0], v[1], (1, 1), Padding::Same)),
        case("conv_same_strided", &[&[1, 5, 5, 2], &[3, 3, 2, 2]], |t, v| {
            t.conv2d(v[0], v[1], (2, 2), Padding::Same)
        }),
        case("softmax_last", &[&[3, 5]], |t, v| t.softmax(v[0], 1)),
        case("softmax_mid", &[&[2, 4, 3]], |t, v| t.softmax(v[0], 1)),
        case("log_softmax", &[&[3, 5]], |t, v| t.log_softmax(v[0], 1)),
        case("softmax_ce_mean", &[&[3, 4]], move |t, v| {
            t.softmax_cross_entropy(v[0], &targets, Reduction::Mean)
        }),
        case("layer_norm_last", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1, 1e-5)),
        case("layer_norm_mid", &[&[2, 5, 3], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1, 1e-5)),
        case("batch_norm_train", &[&[6, 3], &[3], &[3]], |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], &RunningStats::empty(), Mode::Train, 1e-5)?.0)
        }),
        case("batch_norm_eval", &[&[2, 2, 3], &[3], &[3]], move |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], &stats, Mode::Eval, 1e-5)?.0)
        }),
        case("dropout", &[&[4, 6]], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            t.dropout(v[0], 0.3, Mode::Train, &mut rng)
        }),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("concat", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("narrow", &[&[3, 5]], |t, v| t.narrow(v[0], 1, 1, 3)),
        case("mean_axis", &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 1)),
        case("sum_all", &[&[2, 3]], |t, v| Ok(t.sum_all(v[0]))),
        case("gru_cell", &[&[2, 3], &[2, 4], &[3, 12], &[4, 12], &[12]], |t, v| {
            t.gru_cell(v[0], v[1], &GruWeights { w: v[2], u: v[3], b: v[4] })
        }),
    ])
}

/// Reduces `v` to a scalar through a fixed random weighting so that every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(t: &mut Tape, v: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let w = Tensor::from_fn(t.shape(v), |_| rng.random_range(-1.0..1.0));
    let w = t.constant(w);
    let p = t.mul(v, w)?;
    Ok(t.sum_all(p))
}

/// Checks every primitive at `points` random inputs (uniform in [-1, 1]).
pub fn primitive_gradchecks(points: u64, eps: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::new();
    for (name, shapes, f) in cases()? {
        let mut worst: f64 = 0.0;
        for seed in 0..points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
                .collect();
            let report = gradcheck(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_sum(t, y)
                },
                &inputs,
                eps,
            )?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(PrimitiveCheck {
            name,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
