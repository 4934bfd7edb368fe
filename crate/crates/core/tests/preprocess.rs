use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trasend_core::preprocess::*;
use trasend_core::Error;

fn direct_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &v) in x.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            (re, im)
        })
        .collect()
}

fn recording(id: &str, kind: SensorKind, ts: Vec<f64>, d: usize, f: impl Fn(f64, usize) -> f64) -> SensorRecording {
    let vs = ts.iter().flat_map(|&t| (0..d).map(move |j| (t, j))).map(|(t, j)| f(t, j)).collect();
    SensorRecording::new(id, kind, d, ts, vs).unwrap()
}

fn grid(seconds: f64, hz: f64) -> Vec<f64> {
    let n = (seconds * hz).round() as usize;
    (0..n).map(|i| i as f64 / hz).collect()
}

#[test]
fn dft_constant_signal_is_dc_only() {
    let feats = dft_features(&[1.0; 10], 10).unwrap();
    assert!((feats[0] - 10.0).abs() < 1e-12);
    assert_eq!(feats[1], 0.0);
    for k in 1..10 {
        assert!(feats[2 * k].abs() < 1e-12);
        assert_eq!(feats[2 * k + 1], 0.0, "phase of an empty bin");
    }
}

#[test]
fn dft_cosine_hits_two_bins() {
    let x: Vec<f64> = (0..10).map(|n| (2.0 * std::f64::consts::PI * 2.0 * n as f64 / 10.0).cos()).collect();
    let feats = dft_features(&x, 10).unwrap();
    for k in 0..10 {
        let want = if k == 2 || k == 8 { 5.0 } else { 0.0 };
        assert!((feats[2 * k] - want).abs() < 1e-9, "bin {k}: {}", feats[2 * k]);
    }
}

#[test]
fn dft_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let feats = dft_features(&x, 10).unwrap();
        for (k, (re, im)) in direct_dft(&x).into_iter().enumerate() {
            let (m, p) = (feats[2 * k], feats[2 * k + 1]);
            assert!((m * p.cos() - re).abs() < 1e-9);
            assert!((m * p.sin() - im).abs() < 1e-9);
            assert!((m - re.hypot(im)).abs() < 1e-9);
            assert!(p > -std::f64::consts::PI && p <= std::f64::consts::PI);
        }
    }
}

#[test]
fn resampling_is_exact_on_affine_signals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (start, end) = (2.0, 2.25);
    let mut ts: Vec<f64> = (0..9).map(|_| rng.random_range(start..end)).collect();
    ts.push(start);
    ts.push(end);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let iv = Interval {
        start,
        end,
        dims: 1,
        values: ts.iter().map(|t| 2.0 * t + 1.0).collect(),
        timestamps: ts,
    };
    let r = resample_interval(&iv, 10, "s").unwrap();
    for (m, v) in r.iter().enumerate() {
        let t = start + (end - start) * m as f64 / 9.0;
        assert!((v - (2.0 * t + 1.0)).abs() < 1e-12, "target {t}");
    }
}

#[test]
fn resampling_constant_signal() {
    let iv = Interval {
        start: 0.0,
        end: 0.25,
        dims: 2,
        timestamps: vec![0.01, 0.1, 0.2],
        values: vec![4.0, -2.0, 4.0, -2.0, 4.0, -2.0],
    };
    let r = resample_interval(&iv, 10, "s").unwrap();
    assert_eq!(&r[..10], &[4.0; 10]);
    assert_eq!(&r[10..], &[-2.0; 10]);
}

#[test]
fn resampling_matches_two_point_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mut ts: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..0.25)).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let vs: Vec<f64> = ts.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let iv = Interval {
            start: 0.0,
            end: 0.25,
            dims: 1,
            timestamps: ts.clone(),
            values: vs.clone(),
        };
        let r = resample_interval(&iv, 10, "s").unwrap();
        for (m, &got) in r.iter().enumerate() {
            let t = 0.25 * m as f64 / 9.0;
            let want = if t <= ts[0] {
                vs[0]
            } else if t >= *ts.last().unwrap() {
                *vs.last().unwrap()
            } else {
                let i = (0..ts.len() - 1).find(|&i| ts[i] <= t && t < ts[i + 1]).unwrap();
                vs[i] + (vs[i + 1] - vs[i]) * (t - ts[i]) / (ts[i + 1] - ts[i])
            };
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn irregular_timestamps_partition_by_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ts: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..5.0)).collect();
    ts.push(0.0);
    ts.push(4.99);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let rec = recording("acc", SensorKind::Accelerometer, ts.clone(), 1, |t, _| t);
    let samples = segment(&rec, 5.0, 0.25).unwrap();
    assert_eq!(samples.len(), 1);
    let intervals = &samples[0];
    let mut seen = 0;
    for (j, iv) in intervals.iter().enumerate() {
        for &t in &iv.timestamps {
            assert!(t >= 0.25 * j as f64 && t < 0.25 * (j + 1) as f64);
        }
        seen += iv.len();
    }
    assert_eq!(seen, ts.len());
    let counts: Vec<usize> = intervals.iter().map(Interval::len).collect();
    assert!(counts.iter().min() != counts.iter().max());
}

#[test]
fn built_sample_has_documented_shape_and_layout() {
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let ts = grid(5.0, 50.0);
    let acc = recording("acc", SensorKind::Accelerometer, ts.clone(), 3, |t, j| (7.0 * t + j as f64).sin());
    let gyro = recording("gyro", SensorKind::Gyroscope, ts, 3, |t, j| (3.0 * t * (j + 1) as f64).cos());
    let s = pre.build_sample(&[acc.clone(), gyro.clone()], 2, "u").unwrap();
    assert_eq!(s.tensors.len(), 2);
    for x in &s.tensors {
        assert_eq!(x.shape(), &[3, 20, 20]);
    }
    assert_eq!((s.label, s.user_id.as_str(), s.origin), (2, "u", Origin::Real));

    let rows = s.timestep_rows(0);
    assert_eq!(rows.shape(), &[20, 60]);
    // Row t, block k holds bin k of every dimension: recompute bin k directly.
    let intervals = segment(&acc, 5.0, 0.25).unwrap().remove(0);
    for (t, iv) in intervals.iter().enumerate() {
        let points = resample_interval(iv, 10, "acc").unwrap();
        for j in 0..3 {
            let dft = direct_dft(&points[j * 10..(j + 1) * 10]);
            for (k, (re, im)) in dft.iter().enumerate() {
                let block = &rows.data()[t * 60 + 6 * k..t * 60 + 6 * (k + 1)];
                assert!((block[2 * j] - re.hypot(*im)).abs() < 1e-9);
            }
        }
    }

    let again = pre.build_sample(&[acc, gyro], 2, "u").unwrap();
    for (a, b) in s.tensors.iter().zip(&again.tensors) {
        assert!(a.bitwise_eq(b));
    }
}

#[test]
fn misaligned_sensors_rejected() {
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let acc = recording("acc", SensorKind::Accelerometer, grid(5.0, 50.0), 1, |t, _| t);
    let late: Vec<f64> = grid(5.0, 50.0).into_iter().map(|t| t + 1.0).collect();
    let gyro = recording("gyro", SensorKind::Gyroscope, late, 1, |t, _| t);
    assert!(matches!(pre.build_sample(&[acc, gyro], 0, "u"), Err(Error::Alignment(_))));
}

#[test]
fn gap_error_names_sensor_and_range() {
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let ts: Vec<f64> = grid(5.0, 50.0).into_iter().filter(|&t| !(1.0..1.25).contains(&t)).collect();
    let rec = recording("wrist", SensorKind::Other, ts, 1, |t, _| t);
    match pre.build_sample(&[rec], 0, "u") {
        Err(Error::Gap { sensor, start, end }) => {
            assert_eq!(sensor, "wrist");
            assert!((start - 1.0).abs() < 1e-12 && (end - 1.25).abs() < 1e-12);
        }
        other => panic!("expected a gap error, got {other:?}"),
    }
}

fn window(values: impl Fn(f64, usize) -> f64) -> RawWindow {
    RawWindow {
        user_id: "u".into(),
        label: 1,
        start: 0.0,
        recordings: vec![recording("acc", SensorKind::Accelerometer, grid(5.0, 50.0), 3, values)],
    }
}

#[test]
fn augmentation_counts_and_origin() {
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let w = window(|t, j| (t + j as f64).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(pre.augment(&w, &AugmentationSpec::none(), &mut rng).unwrap().is_empty());
    let copies = pre.augment(&w, &AugmentationSpec::default(), &mut rng).unwrap();
    assert_eq!(copies.len(), 9);
    for c in &copies {
        assert_eq!((c.origin, c.label, c.user_id.as_str()), (Origin::Augmented, 1, "u"));
    }
}

#[test]
fn zero_variance_augmentation_reproduces_original() {
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let w = window(|t, j| (2.0 * t - j as f64).cos());
    let spec = AugmentationSpec {
        copies: 3,
        accelerometer_variance: 0.0,
        ..AugmentationSpec::default()
    };
    let clean = pre.build_window(&w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for c in pre.augment(&w, &spec, &mut rng).unwrap() {
        assert!(c.tensors[0].bitwise_eq(&clean.tensors[0]));
    }
}

#[test]
fn augmented_dc_magnitude_concentrates() {
    // Zero-mean noise leaves the expected DFT sum unchanged; the bin-0
    // magnitude of a constant signal of 10 averages back to 10·f.
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let w = window(|_, _| 10.0);
    let spec = AugmentationSpec {
        copies: 10_000,
        ..AugmentationSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let copies = pre.augment(&w, &spec, &mut rng).unwrap();
    let clean = pre.build_window(&w).unwrap().tensors[0].data()[0];
    assert!((clean - 100.0).abs() < 1e-9);
    let mean = copies.iter().map(|c| c.tensors[0].data()[0]).sum::<f64>() / copies.len() as f64;
    assert!((mean - clean).abs() / clean < 0.01, "mean {mean}");
}

#[test]
fn augmentation_stream_is_per_window() {
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let a = window(|t, _| t.sin());
    let b = RawWindow { label: 0, ..window(|t, _| t.cos()) };
    let spec = AugmentationSpec { copies: 2, ..AugmentationSpec::default() };
    let both = pre.build_with_augmentation(&[a.clone(), b], &spec, 4).unwrap();
    let alone = pre.build_with_augmentation(&[a], &spec, 4).unwrap();
    assert_eq!(both.len(), 6);
    assert_eq!(both.iter().filter(|s| s.origin == Origin::Real).count(), 2);
    assert!(both[2].tensors[0].bitwise_eq(&alone[1].tensors[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval(x in proptest::collection::vec(-100.0f64..100.0, 1..32)) {
        let f = x.len();
        let feats = dft_features(&x, f).unwrap();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spectral: f64 = (0..f).map(|k| feats[2 * k] * feats[2 * k]).sum::<f64>() / f as f64;
        prop_assert!((energy - spectral).abs() <= 1e-9 * energy.max(1e-300));
    }

    #[test]
    fn every_point_in_a_retained_sample_lands_in_one_interval(
        seconds in 5.0f64..16.0, hz in 20.0f64..120.0, seed in 0u64..100,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts: Vec<f64> = grid(seconds, hz).into_iter().map(|t| t + rng.random_range(0.0..0.4 / hz)).collect();
        ts.dedup();
        let rec = recording("a", SensorKind::Other, ts.clone(), 1, |t, _| t);
        let samples = segment(&rec, 5.0, 0.25).unwrap();
        let origin = ts[0];
        for (k, intervals) in samples.iter().enumerate() {
            let lo = origin + 5.0 * k as f64;
            let inside: Vec<f64> = ts.iter().copied().filter(|&t| t >= lo && t < lo + 5.0).collect();
            let assigned: Vec<f64> = intervals.iter().flat_map(|iv| iv.timestamps.clone()).collect();
            prop_assert_eq!(&inside, &assigned);
            for iv in intervals {
                prop_assert!(iv.timestamps.iter().all(|&t| t >= iv.start && t < iv.end));
            }
        }
    }

    #[test]
    fn layout_blocks_hold_one_bin(d in 1usize..4, seed in 0u64..50) {
        let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..6.0)).collect();
        let rec = recording("a", SensorKind::Other, grid(5.0, 50.0), d, |t, j| (9.0 * t + phases[j]).sin() + j as f64);
        let s = pre.build_sample(&[rec], 0, "u").unwrap();
        let x = &s.tensors[0];
        let rows = s.timestep_rows(0);
        let width = 20 * d;
        for t in 0..20 {
            for k in 0..10 {
                for j in 0..d {
                    for c in 0..2 {
                        let want = x.at(&[j, 2 * k + c, t]);
                        prop_assert_eq!(rows.data()[t * width + 2 * d * k + 2 * j + c], want);
                    }
                }
            }
        }
    }
}
