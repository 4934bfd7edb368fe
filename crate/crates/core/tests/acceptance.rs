//! Acceptance criteria, one line each. Runs without the test harness so the
//! verdicts are always printed; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use trasend_core::autodiff::{Mode, Tape, Tensor, Var};
use trasend_core::checkpoint::{load_checkpoint, save_checkpoint};
use trasend_core::metrics::{macro_f1, Confusion};
use trasend_core::model::{Model, ModelConfig, Pass, SensorSpec, Variant};
use trasend_core::pipeline::preprocess_dataset;
use trasend_core::preprocess::{dft_features, AugmentationSpec, PreprocessConfig};
use trasend_core::synth::{generate_synthetic_dataset, SyntheticSpec};
use trasend_core::train::{batch_inputs, leave_one_user_out, NeuralLearner, TrainConfig};
use trasend_core::validation::{
    augmentation_ablation, gradcheck_suite, permuted_label_experiment, personalization_experiment, AugmentationAblation,
    PermutedLabelExperiment, PersonalizationExperiment,
};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient correctness", gradients),
        ("preprocessing exactness", preprocessing),
        ("architecture shape law", shapes),
        ("synthetic end-to-end learning", end_to_end),
        ("personalization effect", personalization),
        ("permuted-label validation", permuted_labels),
        ("augmentation ablation", augmentation),
        ("determinism and persistence", determinism),
        ("metric correctness", metrics),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn gradients() -> Verdict {
    let started = Instant::now();
    let lines = gradcheck_suite(0).map_err(|e| e.to_string())?;
    let worst = lines.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let secs = started.elapsed().as_secs_f64();
    check(
        lines.iter().all(|l| l.passed) && secs < 120.0,
        format!(
            "{} checks, worst {} at {:.2e} (limit 1e-4), {secs:.1}s (limit 120s)",
            lines.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

/// X_k = Σ_m x_m e^{-2πikm/f}, summed directly.
fn direct_dft(x: &[f64]) -> Vec<Complex<f64>> {
    let f = x.len();
    (0..f)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(m, &v)| Complex::from_polar(v, -std::f64::consts::TAU * (k * m) as f64 / f as f64))
                .sum()
        })
        .collect()
}

fn preprocessing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut dft_err, mut parseval_err) = (0.0f64, 0.0f64);
    for f in [1, 2, 3, 7, 10, 16, 31] {
        for _ in 0..20 {
            let x: Vec<f64> = (0..f).map(|_| rng.random_range(-50.0..50.0)).collect();
            let feats = dft_features(&x, f).map_err(|e| e.to_string())?;
            for (k, c) in direct_dft(&x).iter().enumerate() {
                let got = Complex::from_polar(feats[2 * k], feats[2 * k + 1]);
                dft_err = dft_err.max((got - c).norm() / c.norm().max(1.0));
            }
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let spectral: f64 = (0..f).map(|k| feats[2 * k].powi(2)).sum::<f64>() / f as f64;
            parseval_err = parseval_err.max((energy - spectral).abs() / energy);
        }
    }

    let spec = SyntheticSpec {
        users: 1,
        classes: 2,
        samples_per_class: 1,
        sensors: vec![SyntheticSpec::default().sensors[0].clone()],
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    let config = PreprocessConfig::default();
    let samples = preprocess_dataset(&ds, &config, &AugmentationSpec::none(), 0).map_err(|e| e.to_string())?;
    let shape = samples[0].tensors[0].shape().to_vec();
    let rows = samples[0].timestep_rows(0).shape().to_vec();
    check(
        dft_err < 1e-9 && parseval_err < 1e-9 && shape == [3, 20, 20] && rows == [20, 60] && samples.len() == 2,
        format!("DFT error {dft_err:.1e}, Parseval error {parseval_err:.1e}, tensor {shape:?}, rows {rows:?}"),
    )
}

fn shapes() -> Verdict {
    let sensors: Vec<SensorSpec> = ["acc", "gyro"]
        .iter()
        .map(|id| SensorSpec {
            id: id.to_string(),
            dims: 3,
        })
        .collect();
    let config = ModelConfig {
        positional_encoding: false,
        ..ModelConfig::new(sensors, 20, 10, 6, Variant::Trasend)
    };
    let model = Model::new(config.clone()).map_err(|e| e.to_string())?;
    let store = model.init_params(0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(&[2, 20, 60], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let dm = config.d_model();

    let mut tape = Tape::new();
    let x: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let mut drop = ChaCha8Rng::seed_from_u64(0);
    let mut pass = Pass::new(&mut tape, &store, Mode::Eval, &mut drop);
    let maps = [
        model.individual_conv(&mut pass, 0, x[0]).map_err(|e| e.to_string())?,
        model.individual_conv(&mut pass, 1, x[1]).map_err(|e| e.to_string())?,
    ];
    let conv_out = pass.tape.shape(maps[0]).to_vec();
    let seq = Tensor::from_fn(&[2, 20, dm], |_| rng.random_range(-1.0..1.0));
    let sv = pass.tape.constant(seq.clone());
    let block = model.temporal_block(&mut pass, sv).map_err(|e| e.to_string())?;
    let block_shape = pass.tape.shape(block).to_vec();
    let attn = pass.attention[0];
    let row_err = tape
        .value(attn)
        .data()
        .chunks(20)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    // self-attention with positional encoding off commutes with permuting time
    let perm: Vec<usize> = (0..20).map(|t| (7 * t + 3) % 20).collect();
    let permute = |x: &Tensor| {
        Tensor::from_fn(x.shape(), |i| {
            let (b, t, c) = (i / (20 * dm), (i / dm) % 20, i % dm);
            x.at(&[b, perm[t], c])
        })
    };
    let attend = |x: &Tensor| -> Result<Tensor, String> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let mut drop = ChaCha8Rng::seed_from_u64(0);
        let mut pass = Pass::new(&mut tape, &store, Mode::Eval, &mut drop);
        let y = model.self_attention(&mut pass, v).map_err(|e| e.to_string())?;
        Ok(tape.value(y).clone())
    };
    let equivariance = attend(&permute(&seq))?
        .max_abs_diff(&permute(&attend(&seq)?))
        .map_err(|e| e.to_string())?;

    let widths = [config.input_width(0), config.conv_widths()[0], config.conv_widths()[1], config.conv_widths()[2]];
    check(
        widths == [60, 8, 6, 4]
            && dm == 512
            && conv_out == [40, 1, 4, 64]
            && block_shape == [2, 20, 512]
            && row_err < 1e-6
            && equivariance <= 1e-12,
        format!(
            "widths {widths:?}, d_model {dm}, block {block_shape:?}, attention row error {row_err:.1e}, \
             permutation mismatch {equivariance:.1e} (summation order only)"
        ),
    )
}

fn end_to_end() -> Verdict {
    let spec = SyntheticSpec {
        noise: 0.5,
        user_freq_shift: 0.5,
        user_offset: 0.5,
        jitter: 0.2,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    let pre = PreprocessConfig::default();
    let samples = preprocess_dataset(&ds, &pre, &AugmentationSpec::none(), 0).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let mut scores = Vec::new();
    for variant in [Variant::Trasend, Variant::Deepsense] {
        let config = ModelConfig::tiny(ds.manifest.sensor_specs(), 20, 10, 4, variant);
        let train = TrainConfig {
            epochs: 10,
            augmentation: AugmentationSpec::none(),
            ..TrainConfig::default()
        };
        let mut learner = NeuralLearner::new(Model::new(config).map_err(|e| e.to_string())?, train);
        let run = leave_one_user_out(&samples, &samples, 4, &mut learner, 0).map_err(|e| e.to_string())?;
        scores.push(run.report.aggregate_f1);
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        scores[0] >= 0.90 && scores[1] >= 0.85 && secs < 900.0,
        format!(
            "aggregate macro-F1 {:.4} (trasend, need 0.90), {:.4} (deepsense, need 0.85), {secs:.0}s",
            scores[0], scores[1]
        ),
    )
}

fn personalization() -> Verdict {
    let s = personalization_experiment(&PersonalizationExperiment::default()).map_err(|e| e.to_string())?;
    let frozen = s.users.iter().all(|u| u.extractor_unchanged);
    check(
        s.mean_gain >= 0.05 && s.non_negative_fraction >= 0.75 && frozen,
        format!(
            "mean F1 gain {:.4} (need 0.05), {:.0}% of users not worse (need 75%), extractor bitwise frozen: {frozen}",
            s.mean_gain,
            100.0 * s.non_negative_fraction
        ),
    )
}

fn permuted_labels() -> Verdict {
    let s = permuted_label_experiment(&PermutedLabelExperiment::default()).map_err(|e| e.to_string())?;
    check(
        (s.mean_f1_random_train - s.chance).abs() <= 0.10 && s.mean_improvement() >= 0.15,
        format!(
            "random-label F1 {:.3} vs chance {:.3} (within 0.10), after personalization {:.3} (+{:.3}, need 0.15), mean of {} seeds",
            s.mean_f1_random_train,
            s.chance,
            s.mean_f1_after_personalization,
            s.mean_improvement(),
            s.runs.len()
        ),
    )
}

fn augmentation() -> Verdict {
    let s = augmentation_ablation(&AugmentationAblation::default()).map_err(|e| e.to_string())?;
    check(
        s.mean_gain() >= 0.02,
        format!(
            "macro-F1 {:.4} without, {:.4} with {} copies (gain {:.4}, need 0.02), mean of {} seeds",
            s.mean_without,
            s.mean_with,
            s.copies,
            s.mean_gain(),
            s.runs.len()
        ),
    )
}

fn determinism() -> Verdict {
    let spec = SyntheticSpec {
        users: 3,
        classes: 3,
        samples_per_class: 4,
        sample_len: 2.0,
        bout_samples: 2,
        ..SyntheticSpec::default()
    };
    let pre = PreprocessConfig {
        sample_len: 2.0,
        ..PreprocessConfig::default()
    };
    let aug = AugmentationSpec {
        copies: 2,
        ..AugmentationSpec::default()
    };
    let run = || -> Result<(String, Vec<u64>, trasend_core::autodiff::ParamStore, Model), String> {
        let ds = generate_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
        let samples = preprocess_dataset(&ds, &pre, &aug, 5).map_err(|e| e.to_string())?;
        let model = Model::new(ModelConfig::tiny(ds.manifest.sensor_specs(), 8, 10, 3, Variant::TrasendCa))
            .map_err(|e| e.to_string())?;
        let train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            augmentation: aug.clone(),
            ..TrainConfig::default()
        };
        let mut learner = NeuralLearner::new(model.clone(), train);
        learner.keep_params = true;
        let out = leave_one_user_out(&samples, &samples, 3, &mut learner, 9).map_err(|e| e.to_string())?;
        let bits = out.report.per_user.values().map(|r| r.f1.to_bits()).collect();
        let params = out.params.into_values().next().ok_or("no parameters kept")?;
        Ok((serde_json::to_string(&out.report).map_err(|e| e.to_string())?, bits, params, model))
    };
    let (a, a_bits, params, model) = run()?;
    let (b, b_bits, _, _) = run()?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_checkpoint(dir.path(), &params, model.config(), 9).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(dir.path()).map_err(|e| e.to_string())?;
    let ds = generate_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    let samples = preprocess_dataset(&ds, &pre, &AugmentationSpec::none(), 0).map_err(|e| e.to_string())?;
    let x = batch_inputs(&samples.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let before = model.predict_proba(&params, &x).map_err(|e| e.to_string())?;
    let after = Model::new(ck.config)
        .and_then(|m| m.predict_proba(&ck.params, &x))
        .map_err(|e| e.to_string())?;
    check(
        a == b && a_bits == b_bits && before.bitwise_eq(&after),
        format!(
            "reports identical: {}, checkpoint forward outputs bitwise equal: {} ({} probabilities)",
            a == b && a_bits == b_bits,
            before.bitwise_eq(&after),
            before.len()
        ),
    )
}

fn metrics() -> Verdict {
    // (pred, truth, classes, per-class F1 worked out from the confusion matrix)
    let fixtures: [(&[usize], &[usize], usize, f64); 10] = [
        (&[0, 1, 2], &[0, 1, 2], 3, (1.0 + 1.0 + 1.0) / 3.0),
        (&[0, 0, 0, 0], &[0, 0, 1, 1], 2, (2.0 / 3.0 + 0.0) / 2.0),
        (&[1, 0], &[0, 1], 2, (0.0 + 0.0) / 2.0),
        (&[0, 1, 1, 2, 2, 0], &[0, 0, 1, 1, 2, 2], 3, (2.0 / 4.0 + 2.0 / 4.0 + 2.0 / 4.0) / 3.0),
        (&[0, 1], &[0, 1], 3, (1.0 + 1.0 + 0.0) / 3.0),
        (&[0, 0, 1, 1], &[0, 0, 0, 1], 2, (4.0 / 5.0 + 2.0 / 3.0) / 2.0),
        (&[0, 0, 0, 0], &[0, 1, 2, 3], 4, (2.0 / 5.0 + 0.0 + 0.0 + 0.0) / 4.0),
        (&[1, 1, 1], &[1, 1, 1], 2, (0.0 + 1.0) / 2.0),
        (&[0, 1, 2, 2, 2, 1], &[0, 1, 1, 2, 2, 2], 3, (1.0 + 2.0 / 4.0 + 4.0 / 6.0) / 3.0),
        (&[2, 0, 0, 1, 1], &[2, 2, 0, 0, 1], 3, (2.0 / 4.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0),
    ];
    let mut mismatches = Vec::new();
    for (i, (pred, truth, c, want)) in fixtures.iter().enumerate() {
        let got = macro_f1(pred, truth, *c).map_err(|e| e.to_string())?;
        if got != *want {
            mismatches.push(format!("fixture {i}: {got} != {want}"));
        }
    }
    let confusion = Confusion::from_labels(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).map_err(|e| e.to_string())?;
    let third = confusion.per_class_f1() == [2.0 / 3.0, 0.0] && confusion.macro_f1() == 1.0 / 3.0;
    check(
        mismatches.is_empty() && third,
        if mismatches.is_empty() {
            format!("{} fixtures match exactly, [A,A,B,B] vs all-A gives 1/3", fixtures.len())
        } else {
            mismatches.join("; ")
        },
    )
}
