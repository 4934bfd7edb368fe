//! Synthetic multi-user activity data.
//!
//! Every channel `j` of sensor `s` during a bout of class `c` for user `u` is
//! `A_c·sin(2π(F_c + δ_u)t + φ_{s,j}) + o_{u,s,j} + noise`, where `δ_u` is a
//! per-user frequency shift and `o_{u,s,j}` a per-user offset. Each user's
//! timeline cycles through the classes in bouts, so activities interleave in
//! time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Activity, Dataset, DatasetManifest, LabelInterval, SensorInfo, UserData};
use crate::error::{Error, Result};
use crate::preprocess::{split_seed, SensorKind, SensorRecording};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub name: String,
    pub users: usize,
    pub classes: usize,
    pub sensors: Vec<SensorInfo>,
    /// `F_c` in Hz; defaults to evenly spaced values in [1.5, 15].
    pub class_frequencies: Option<Vec<f64>>,
    /// `A_c`; defaults to `1 + 0.2c`.
    pub class_amplitudes: Option<Vec<f64>>,
    /// `δ_u` is drawn uniformly from `[-user_freq_shift, user_freq_shift]` Hz.
    pub user_freq_shift: f64,
    /// Each `o_{u,s,j}` is drawn uniformly from `[-user_offset, user_offset]`.
    pub user_offset: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Windows of `sample_len` seconds per (user, class).
    pub samples_per_class: usize,
    pub sample_len: f64,
    /// Windows per activity bout.
    pub bout_samples: usize,
    /// Timestamp jitter as a fraction of the nominal sampling period.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            users: 4,
            classes: 4,
            sensors: vec![
                SensorInfo {
                    id: "acc".into(),
                    kind: SensorKind::Accelerometer,
                    dims: 3,
                    rate_hz: 50.0,
                },
                SensorInfo {
                    id: "gyro".into(),
                    kind: SensorKind::Gyroscope,
                    dims: 3,
                    rate_hz: 50.0,
                },
            ],
            class_frequencies: None,
            class_amplitudes: None,
            user_freq_shift: 0.0,
            user_offset: 0.0,
            noise: 0.1,
            samples_per_class: 40,
            sample_len: 5.0,
            bout_samples: 5,
            jitter: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn frequencies(&self) -> Vec<f64> {
        self.class_frequencies.clone().unwrap_or_else(|| {
            let c = self.classes;
            (0..c)
                .map(|k| if c == 1 { 1.5 } else { 1.5 + 13.5 * k as f64 / (c - 1) as f64 })
                .collect()
        })
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.class_amplitudes
            .clone()
            .unwrap_or_else(|| (0..self.classes).map(|k| 1.0 + 0.2 * k as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.users == 0 || self.classes == 0 || self.samples_per_class == 0 || self.bout_samples == 0 {
            return fail("users, classes, samples_per_class and bout_samples must be at least 1".into());
        }
        if self.sensors.is_empty() || self.sensors.iter().any(|s| s.dims == 0 || !(s.rate_hz > 0.0)) {
            return fail("need at least one sensor with positive dims and rate".into());
        }
        let (freqs, amps) = (self.frequencies(), self.amplitudes());
        if freqs.len() != self.classes || amps.len() != self.classes {
            return fail(format!("need {} class frequencies and amplitudes", self.classes));
        }
        let min_rate = self.sensors.iter().map(|s| s.rate_hz).fold(f64::INFINITY, f64::min);
        let nyquist = min_rate / 2.0;
        for &f in &freqs {
            let top = f.abs() + self.user_freq_shift.abs();
            if top >= nyquist {
                return fail(format!("class frequency {f} Hz (plus user shift) reaches the Nyquist limit {nyquist} Hz"));
            }
        }
        let nonneg = [self.user_freq_shift, self.user_offset, self.noise, self.jitter];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.jitter >= 1.0 {
            return fail("shift, offset and noise must be >= 0 and jitter in [0, 1)".into());
        }
        if !(self.sample_len > 0.0) {
            return fail("sample_len must be positive".into());
        }
        Ok(())
    }

    pub fn user_ids(&self) -> Vec<String> {
        let width = self.users.to_string().len();
        (0..self.users).map(|u| format!("user{u:0width$}")).collect()
    }

    /// Classes of the bouts in one user's timeline, in order.
    fn bout_plan(&self) -> Vec<(usize, usize)> {
        let per_class = self.samples_per_class;
        let bouts = per_class.div_ceil(self.bout_samples);
        let mut plan = Vec::new();
        for b in 0..bouts {
            let n = self.bout_samples.min(per_class - b * self.bout_samples);
            for c in 0..self.classes {
                plan.push((c, n));
            }
        }
        plan
    }
}

/// Generates the dataset described by `spec`; a pure function of `spec`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let freqs = spec.frequencies();
    let amps = spec.amplitudes();
    let mut phase_rng = ChaCha8Rng::seed_from_u64(split_seed(spec.seed, u64::MAX));
    let phases: Vec<Vec<f64>> = spec
        .sensors
        .iter()
        .map(|s| (0..s.dims).map(|_| phase_rng.random_range(0.0..std::f64::consts::TAU)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;

    let plan = spec.bout_plan();
    let total: f64 = plan.iter().map(|&(_, n)| n as f64 * spec.sample_len).sum();
    let mut labels = Vec::with_capacity(plan.len());
    let mut t0 = 0.0;
    for &(class, n) in &plan {
        let end = t0 + n as f64 * spec.sample_len;
        labels.push(LabelInterval { start: t0, end, class });
        t0 = end;
    }

    let mut users = Vec::with_capacity(spec.users);
    for (u, user_id) in spec.user_ids().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(spec.seed, u as u64));
        let shift = if spec.user_freq_shift > 0.0 {
            rng.random_range(-spec.user_freq_shift..=spec.user_freq_shift)
        } else {
            0.0
        };
        let mut recordings = Vec::with_capacity(spec.sensors.len());
        for (s, sensor) in spec.sensors.iter().enumerate() {
            let offsets: Vec<f64> = (0..sensor.dims)
                .map(|_| {
                    if spec.user_offset > 0.0 {
                        rng.random_range(-spec.user_offset..=spec.user_offset)
                    } else {
                        0.0
                    }
                })
                .collect();
            let n = (total * sensor.rate_hz).round() as usize;
            let period = 1.0 / sensor.rate_hz;
            let mut ts = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n * sensor.dims);
            let mut bout = 0;
            for i in 0..n {
                let jitter = if spec.jitter > 0.0 {
                    rng.random_range(-0.5..0.5) * spec.jitter * period
                } else {
                    0.0
                };
                let t = (i as f64 * period + jitter).max(0.0);
                while bout + 1 < labels.len() && t >= labels[bout].end {
                    bout += 1;
                }
                let c = labels[bout].class;
                ts.push(t);
                for j in 0..sensor.dims {
                    let angle = std::f64::consts::TAU * (freqs[c] + shift) * t + phases[s][j];
                    vs.push(amps[c] * angle.sin() + offsets[j] + noise.sample(&mut rng));
                }
            }
            recordings.push(SensorRecording::new(sensor.id.clone(), sensor.kind, sensor.dims, ts, vs)?);
        }
        users.push(UserData {
            user_id,
            recordings,
            labels: labels.clone(),
        });
    }

    let manifest = DatasetManifest {
        name: spec.name.clone(),
        sensors: spec.sensors.clone(),
        users: spec.user_ids(),
        activities: (0..spec.classes)
            .map(|c| Activity {
                index: c,
                name: format!("activity{c}"),
            })
            .collect(),
        files: Default::default(),
    };
    Ok(Dataset { manifest, users })
}
