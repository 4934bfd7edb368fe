//! Raw sensor streams to per-sample frequency-domain tensors.
//!
//! A window of `sample_len` seconds is cut into `T = sample_len / tau`
//! intervals. Each interval is linearly resampled to `f` evenly spaced
//! points and transformed with an unnormalized DFT; the `f` (magnitude,
//! phase) pairs of every dimension form one column of a `d × 2f × T` tensor.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use trasend_autodiff::Tensor;

use crate::error::{Error, Result};

/// Magnitudes below this have their phase reported as 0.
pub const PHASE_MAGNITUDE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Accelerometer,
    Gyroscope,
    Magnetometer,
    Other,
}

/// One sensor's measurements. Values are stored time-major: the `d`
/// readings taken at `timestamps[i]` are `values[i*d .. (i+1)*d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorRecording {
    sensor_id: String,
    kind: SensorKind,
    dims: usize,
    timestamps: Vec<f64>,
    values: Vec<f64>,
}

impl SensorRecording {
    pub fn new(
        sensor_id: impl Into<String>,
        kind: SensorKind,
        dims: usize,
        timestamps: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let sensor_id = sensor_id.into();
        if dims == 0 {
            return Err(Error::InvalidData(format!("sensor {sensor_id}: zero dimensions")));
        }
        if values.len() != timestamps.len() * dims {
            return Err(Error::InvalidData(format!(
                "sensor {sensor_id}: {} values for {} timestamps of dimension {dims}",
                values.len(),
                timestamps.len()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidData(format!(
                "sensor {sensor_id}: timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
        if timestamps.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("sensor {sensor_id}: non-finite entry")));
        }
        Ok(Self {
            sensor_id,
            kind,
            dims,
            timestamps,
            values,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn kind(&self) -> SensorKind {
        self.kind
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Reading of dimension `dim` at measurement `i`.
    pub fn value(&self, i: usize, dim: usize) -> f64 {
        self.values[i * self.dims + dim]
    }

    /// Measurements with timestamps in `[start, end)`.
    pub fn slice_time(&self, start: f64, end: f64) -> SensorRecording {
        let a = self.timestamps.partition_point(|&t| t < start);
        let b = self.timestamps.partition_point(|&t| t < end);
        SensorRecording {
            sensor_id: self.sensor_id.clone(),
            kind: self.kind,
            dims: self.dims,
            timestamps: self.timestamps[a..b].to_vec(),
            values: self.values[a * self.dims..b * self.dims].to_vec(),
        }
    }

    /// Same recording with every reading passed through `f`.
    fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> SensorRecording {
        SensorRecording {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Measurements falling in the half-open time range `[start, end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub dims: usize,
    pub timestamps: Vec<f64>,
    /// time-major, like [`SensorRecording`]
    pub values: Vec<f64>,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

fn timesteps_for(sample_len: f64, tau: f64) -> Result<usize> {
    if !(sample_len > 0.0 && tau > 0.0) {
        return Err(Error::Config(format!(
            "sample length {sample_len} and interval width {tau} must be positive"
        )));
    }
    let t = (sample_len / tau).round();
    if t < 1.0 || (t * tau - sample_len).abs() > 1e-9 * sample_len {
        return Err(Error::Config(format!(
            "sample length {sample_len} is not an integer multiple of interval width {tau}"
        )));
    }
    Ok(t as usize)
}

/// Cuts `rec` into consecutive non-overlapping samples starting at its first
/// timestamp. See [`segment_from`].
pub fn segment(rec: &SensorRecording, sample_len: f64, tau: f64) -> Result<Vec<Vec<Interval>>> {
    match rec.timestamps.first() {
        Some(&origin) => segment_from(rec, origin, sample_len, tau),
        None => {
            timesteps_for(sample_len, tau)?;
            Ok(Vec::new())
        }
    }
}

/// Cuts `rec` into samples `[origin + k·L, origin + (k+1)·L)`, each split into
/// `L / tau` intervals. A sample is kept only when the recording reaches its
/// last interval, so trailing partial samples are dropped.
pub fn segment_from(
    rec: &SensorRecording,
    origin: f64,
    sample_len: f64,
    tau: f64,
) -> Result<Vec<Vec<Interval>>> {
    let steps = timesteps_for(sample_len, tau)?;
    let Some(&last) = rec.timestamps.last() else {
        return Ok(Vec::new());
    };
    let mut samples = Vec::new();
    for k in 0.. {
        let sample_start = origin + k as f64 * sample_len;
        let last_interval = origin + (k * steps + steps - 1) as f64 * tau;
        if last < last_interval || sample_start > last {
            break;
        }
        let bounds: Vec<f64> = (0..=steps)
            .map(|j| origin + (k * steps + j) as f64 * tau)
            .collect();
        let idx: Vec<usize> = bounds
            .iter()
            .map(|&b| rec.timestamps.partition_point(|&t| t < b))
            .collect();
        let intervals = (0..steps)
            .map(|j| Interval {
                start: bounds[j],
                end: bounds[j + 1],
                dims: rec.dims,
                timestamps: rec.timestamps[idx[j]..idx[j + 1]].to_vec(),
                values: rec.values[idx[j] * rec.dims..idx[j + 1] * rec.dims].to_vec(),
            })
            .collect();
        samples.push(intervals);
    }
    Ok(samples)
}

/// Linearly interpolates `f` evenly spaced points over `[start, end]`,
/// returned as a `d × f` row-major matrix. Targets outside the observed time
/// span take the nearest measurement; a single point is extended as a
/// constant.
pub fn resample_interval(interval: &Interval, f: usize, sensor_id: &str) -> Result<Vec<f64>> {
    let d = interval.dims;
    let n = interval.len();
    if n == 0 {
        return Err(Error::Gap {
            sensor: sensor_id.to_string(),
            start: interval.start,
            end: interval.end,
        });
    }
    let ts = &interval.timestamps;
    let vs = &interval.values;
    let mut out = vec![0.0; d * f];
    for m in 0..f {
        let target = if f == 1 {
            interval.start
        } else {
            interval.start + (interval.end - interval.start) * m as f64 / (f - 1) as f64
        };
        let hi = ts.partition_point(|&t| t <= target);
        for j in 0..d {
            out[j * f + m] = if hi == 0 {
                vs[j]
            } else if hi == n {
                vs[(n - 1) * d + j]
            } else {
                let (t0, t1) = (ts[hi - 1], ts[hi]);
                let (v0, v1) = (vs[(hi - 1) * d + j], vs[hi * d + j]);
                v0 + (v1 - v0) * (target - t0) / (t1 - t0)
            };
        }
    }
    Ok(out)
}

/// Magnitude and principal-value phase of a DFT coefficient.
pub fn polar(c: Complex<f64>) -> (f64, f64) {
    let mag = c.norm();
    if mag < PHASE_MAGNITUDE_FLOOR {
        return (mag, 0.0);
    }
    let mut phase = c.im.atan2(c.re);
    if phase <= -std::f64::consts::PI {
        phase = std::f64::consts::PI;
    }
    (mag, phase)
}

/// Cached DFT of one fixed length.
#[derive(Clone)]
pub struct Dft {
    len: usize,
    plan: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Dft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dft").field("len", &self.len).finish()
    }
}

impl Dft {
    pub fn new(len: usize) -> Self {
        let plan = FftPlanner::new().plan_fft_forward(len.max(1));
        Self { len, plan }
    }

    /// Unnormalized forward DFT of each row of a `d × f` matrix, as a
    /// `d × 2f` matrix of interleaved (magnitude, phase) pairs.
    pub fn features(&self, points: &[f64]) -> Vec<f64> {
        let f = self.len;
        let mut out = Vec::with_capacity(points.len() * 2);
        let mut buf = vec![Complex::new(0.0, 0.0); f];
        for row in points.chunks(f) {
            for (b, &x) in buf.iter_mut().zip(row) {
                *b = Complex::new(x, 0.0);
            }
            self.plan.process(&mut buf);
            for &c in &buf {
                let (m, p) = polar(c);
                out.push(m);
                out.push(p);
            }
        }
        out
    }
}

/// One-off version of [`Dft::features`] for a `d × f` matrix.
pub fn dft_features(points: &[f64], f: usize) -> Result<Vec<f64>> {
    if f == 0 || points.len() % f != 0 {
        return Err(Error::Contract(format!(
            "{} points cannot be split into rows of length {f}",
            points.len()
        )));
    }
    Ok(Dft::new(f).features(points))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedSample {
    /// One `d × 2f × T` tensor per sensor.
    pub tensors: Vec<Tensor>,
    pub label: usize,
    pub user_id: String,
    pub origin: Origin,
    /// Start time of the window, seconds.
    pub start: f64,
}

impl PreprocessedSample {
    pub fn timesteps(&self) -> usize {
        self.tensors.first().map_or(0, |t| t.shape()[2])
    }

    /// Sensor `s` as a `T × 2f·d` matrix. Row `t` holds frequency bin `k`
    /// of dimension `j` at offsets `2d·k + 2j` (magnitude) and `2d·k + 2j + 1`
    /// (phase).
    pub fn timestep_rows(&self, s: usize) -> Tensor {
        let x = &self.tensors[s];
        let (d, two_f, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let width = two_f * d;
        let data = x.data();
        let mut rows = vec![0.0; t * width];
        for j in 0..d {
            for r in 0..two_f {
                let (k, c) = (r / 2, r % 2);
                for step in 0..t {
                    rows[step * width + 2 * d * k + 2 * j + c] = data[(j * two_f + r) * t + step];
                }
            }
        }
        Tensor::new(vec![t, width], rows).expect("layout shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// seconds
    pub sample_len: f64,
    /// interval width, seconds
    pub tau: f64,
    /// resampled points (and DFT bins) per interval
    pub freq_bins: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sample_len: 5.0,
            tau: 0.25,
            freq_bins: 10,
        }
    }
}

/// A window of raw recordings with its label, before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawWindow {
    pub user_id: String,
    pub label: usize,
    pub start: f64,
    pub recordings: Vec<SensorRecording>,
}

#[derive(Clone, Debug)]
pub struct Preprocessor {
    config: PreprocessConfig,
    timesteps: usize,
    dft: Dft,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig) -> Result<Self> {
        let timesteps = timesteps_for(config.sample_len, config.tau)?;
        if config.freq_bins == 0 {
            return Err(Error::Config("freq_bins must be at least 1".into()));
        }
        Ok(Self {
            config,
            timesteps,
            dft: Dft::new(config.freq_bins),
        })
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn freq_bins(&self) -> usize {
        self.config.freq_bins
    }

    /// Width of one timestep row for a sensor with `dims` dimensions.
    pub fn row_width(&self, dims: usize) -> usize {
        2 * self.config.freq_bins * dims
    }

    /// `d × 2f × T` tensor of one sensor's sample, given its intervals.
    pub fn sensor_tensor(&self, intervals: &[Interval], sensor_id: &str) -> Result<Tensor> {
        let f = self.config.freq_bins;
        let t = intervals.len();
        let d = intervals.first().map_or(1, |i| i.dims);
        let mut data = vec![0.0; d * 2 * f * t];
        for (step, interval) in intervals.iter().enumerate() {
            let points = resample_interval(interval, f, sensor_id)?;
            let feats = self.dft.features(&points);
            for j in 0..d {
                for r in 0..2 * f {
                    data[(j * 2 * f + r) * t + step] = feats[j * 2 * f + r];
                }
            }
        }
        Ok(Tensor::new(vec![d, 2 * f, t], data)?)
    }

    /// Preprocesses the window starting at `start` for every recording.
    pub fn build_sample_at(
        &self,
        recordings: &[SensorRecording],
        start: f64,
        label: usize,
        user_id: &str,
        origin: Origin,
    ) -> Result<PreprocessedSample> {
        if recordings.is_empty() {
            return Err(Error::Alignment("no sensor recordings in window".into()));
        }
        let c = &self.config;
        let mut tensors = Vec::with_capacity(recordings.len());
        for rec in recordings {
            let window = rec.slice_time(start, start + c.sample_len);
            let mut samples = segment_from(&window, start, c.sample_len, c.tau)?;
            if samples.is_empty() {
                return Err(Error::Alignment(format!(
                    "sensor {} does not cover the window [{start}, {})",
                    rec.sensor_id,
                    start + c.sample_len
                )));
            }
            tensors.push(self.sensor_tensor(&samples.swap_remove(0), &rec.sensor_id)?);
        }
        Ok(PreprocessedSample {
            tensors,
            label,
            user_id: user_id.to_string(),
            origin,
            start,
        })
    }

    /// Preprocesses recordings that each cover one window. The window starts
    /// at the earliest first timestamp; every sensor must begin within one
    /// interval of it.
    pub fn build_sample(
        &self,
        recordings: &[SensorRecording],
        label: usize,
        user_id: &str,
    ) -> Result<PreprocessedSample> {
        let firsts: Vec<f64> = recordings
            .iter()
            .map(|r| r.timestamps.first().copied().unwrap_or(f64::INFINITY))
            .collect();
        let start = firsts.iter().copied().fold(f64::INFINITY, f64::min);
        for (rec, &first) in recordings.iter().zip(&firsts) {
            if first - start > self.config.tau {
                return Err(Error::Alignment(format!(
                    "sensor {} starts at {first}, more than one interval after {start}",
                    rec.sensor_id
                )));
            }
        }
        self.build_sample_at(recordings, start, label, user_id, Origin::Real)
    }

    pub fn build_window(&self, window: &RawWindow) -> Result<PreprocessedSample> {
        self.build_sample_at(
            &window.recordings,
            window.start,
            window.label,
            &window.user_id,
            Origin::Real,
        )
    }

    /// `spec.copies` noisy re-preprocessed versions of `window`.
    pub fn augment<R: Rng>(
        &self,
        window: &RawWindow,
        spec: &AugmentationSpec,
        rng: &mut R,
    ) -> Result<Vec<PreprocessedSample>> {
        spec.validate()?;
        let mut out = Vec::with_capacity(spec.copies);
        for _ in 0..spec.copies {
            let noisy: Vec<SensorRecording> = window
                .recordings
                .iter()
                .map(|rec| {
                    let sd = spec.variance(rec.kind).sqrt();
                    let normal = Normal::new(0.0, sd).expect("validated variance");
                    rec.map_values(|v| v + normal.sample(rng))
                })
                .collect();
            out.push(self.build_sample_at(
                &noisy,
                window.start,
                window.label,
                &window.user_id,
                Origin::Augmented,
            )?);
        }
        Ok(out)
    }

    /// Real samples of every window followed by their augmented copies. Each
    /// window draws noise from its own stream derived from `seed` and its
    /// index, so the result does not depend on processing order.
    pub fn build_with_augmentation(
        &self,
        windows: &[RawWindow],
        spec: &AugmentationSpec,
        seed: u64,
    ) -> Result<Vec<PreprocessedSample>> {
        let mut out = Vec::with_capacity(windows.len() * (spec.copies + 1));
        for w in windows {
            out.push(self.build_window(w)?);
        }
        for (i, w) in windows.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, i as u64));
            out.extend(self.augment(w, spec, &mut rng)?);
        }
        Ok(out)
    }
}

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub copies: usize,
    pub accelerometer_variance: f64,
    pub gyroscope_variance: f64,
    pub magnetometer_variance: f64,
    pub other_variance: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            copies: 9,
            accelerometer_variance: 0.5,
            gyroscope_variance: 0.2,
            magnetometer_variance: 0.2,
            other_variance: 0.2,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            copies: 0,
            ..Self::default()
        }
    }

    pub fn variance(&self, kind: SensorKind) -> f64 {
        match kind {
            SensorKind::Accelerometer => self.accelerometer_variance,
            SensorKind::Gyroscope => self.gyroscope_variance,
            SensorKind::Magnetometer => self.magnetometer_variance,
            SensorKind::Other => self.other_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vars = [
            self.accelerometer_variance,
            self.gyroscope_variance,
            self.magnetometer_variance,
            self.other_variance,
        ];
        if vars.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("augmentation variances must be finite and >= 0: {vars:?}")));
        }
        Ok(())
    }
}
