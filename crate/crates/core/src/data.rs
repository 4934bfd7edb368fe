//! Datasets of labelled multi-sensor recordings and their canonical CSV form.
//!
//! On disk a dataset is a JSON manifest plus, per user, one CSV per sensor
//! (`timestamp_s,<dim0>,<dim1>,...`) and one label CSV
//! (`start_s,end_s,class_index`). Paths in the manifest are relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::SensorSpec;
use crate::preprocess::{PreprocessConfig, RawWindow, SensorKind, SensorRecording};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorInfo {
    pub id: String,
    pub kind: SensorKind,
    pub dims: usize,
    pub rate_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Activity {
    pub index: usize,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserFiles {
    /// sensor id → recording CSV
    pub recordings: BTreeMap<String, PathBuf>,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub sensors: Vec<SensorInfo>,
    pub users: Vec<String>,
    pub activities: Vec<Activity>,
    #[serde(default)]
    pub files: BTreeMap<String, UserFiles>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.activities.len()
    }

    pub fn sensor_specs(&self) -> Vec<SensorSpec> {
        self.sensors
            .iter()
            .map(|s| SensorSpec {
                id: s.id.clone(),
                dims: s.dims,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.sensors.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidData(format!("duplicate sensor id {:?}", w[0])));
        }
        if let Some(s) = self.sensors.iter().find(|s| s.dims == 0 || !(s.rate_hz > 0.0)) {
            return Err(Error::InvalidData(format!("sensor {:?}: dims and rate must be positive", s.id)));
        }
        let mut idx: Vec<usize> = self.activities.iter().map(|a| a.index).collect();
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(Error::InvalidData(format!(
                "activity indices must be contiguous from 0, got {idx:?}"
            )));
        }
        let mut users = self.users.clone();
        users.sort();
        if users.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidData("duplicate user id".into()));
        }
        Ok(())
    }
}

/// One labelled activity bout, seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelInterval {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserData {
    pub user_id: String,
    /// In manifest sensor order.
    pub recordings: Vec<SensorRecording>,
    pub labels: Vec<LabelInterval>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub users: Vec<UserData>,
}

impl Dataset {
    pub fn user(&self, id: &str) -> Option<&UserData> {
        self.users.iter().find(|u| u.user_id == id)
    }

    /// Non-overlapping windows of `sample_len` seconds cut from each label
    /// interval, starting at the interval start. Partial windows at the end
    /// of an interval are dropped.
    pub fn windows(&self, config: &PreprocessConfig) -> Vec<RawWindow> {
        let len = config.sample_len;
        let slack = 1e-9 * len.max(1.0);
        let mut out = Vec::new();
        for user in &self.users {
            for iv in &user.labels {
                let mut start = iv.start;
                let mut k = 0;
                while start + len <= iv.end + slack {
                    out.push(RawWindow {
                        user_id: user.user_id.clone(),
                        label: iv.class,
                        start,
                        recordings: user
                            .recordings
                            .iter()
                            .map(|r| r.slice_time(start, start + len))
                            .collect(),
                    });
                    k += 1;
                    start = iv.start + k as f64 * len;
                }
            }
        }
        out
    }
}

fn data_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(file: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| data_err(file, line, format!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(data_err(file, line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| data_err(path, 0, e.to_string()))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn record_line(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map_or(fallback, |p| p.line() as usize)
}

/// Reads one recording CSV for `sensor`.
pub fn read_recording_csv(path: &Path, sensor: &SensorInfo) -> Result<SensorRecording> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| data_err(path, 1, e.to_string()))?.clone();
    if headers.len() != sensor.dims + 1 || headers.get(0).map(str::trim) != Some("timestamp_s") {
        return Err(data_err(
            path,
            1,
            format!(
                "expected header timestamp_s plus {} dimension columns for sensor {:?}",
                sensor.dims, sensor.id
            ),
        ));
    }
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, i + 2, e.to_string()))?;
        let line = record_line(&rec, i + 2);
        if rec.len() != sensor.dims + 1 {
            return Err(data_err(path, line, format!("expected {} fields, found {}", sensor.dims + 1, rec.len())));
        }
        let t = parse_f64(path, line, &rec[0])?;
        if let Some(&prev) = ts.last() {
            if t <= prev {
                return Err(data_err(path, line, format!("timestamp {t} does not increase (previous {prev})")));
            }
        }
        ts.push(t);
        for field in rec.iter().skip(1) {
            vs.push(parse_f64(path, line, field)?);
        }
    }
    SensorRecording::new(sensor.id.clone(), sensor.kind, sensor.dims, ts, vs)
}

/// Reads a label CSV; intervals must be well-formed and non-overlapping.
pub fn read_labels_csv(path: &Path, classes: usize) -> Result<Vec<LabelInterval>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| data_err(path, 1, e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != ["start_s", "end_s", "class_index"] {
        return Err(data_err(path, 1, "expected header start_s,end_s,class_index"));
    }
    let mut out: Vec<LabelInterval> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, i + 2, e.to_string()))?;
        let line = record_line(&rec, i + 2);
        let start = parse_f64(path, line, &rec[0])?;
        let end = parse_f64(path, line, &rec[1])?;
        let class: usize = rec[2]
            .trim()
            .parse()
            .map_err(|_| data_err(path, line, format!("bad class index {:?}", &rec[2])))?;
        if class >= classes {
            return Err(data_err(path, line, format!("class index {class} outside [0, {classes})")));
        }
        if end <= start {
            return Err(data_err(path, line, format!("interval end {end} not after start {start}")));
        }
        out.push(LabelInterval { start, end, class });
    }
    let mut sorted = out.clone();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    if let Some(w) = sorted.windows(2).find(|w| w[1].start < w[0].end) {
        return Err(data_err(
            path,
            0,
            format!("label intervals overlap: [{}, {}) and [{}, {})", w[0].start, w[0].end, w[1].start, w[1].end),
        ));
    }
    Ok(sorted)
}

/// Loads every user's recordings and labels named by the manifest at `path`.
pub fn load_dataset_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, 0, e.to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| data_err(path, e.line(), e.to_string()))?;
    manifest.validate()?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut users = Vec::with_capacity(manifest.users.len());
    for user in &manifest.users {
        let files = manifest
            .files
            .get(user)
            .ok_or_else(|| data_err(path, 0, format!("no files listed for user {user:?}")))?;
        if let Some(unknown) = files.recordings.keys().find(|k| !manifest.sensors.iter().any(|s| &s.id == *k)) {
            return Err(data_err(path, 0, format!("user {user:?}: unknown sensor id {unknown:?}")));
        }
        let mut recordings = Vec::with_capacity(manifest.sensors.len());
        for sensor in &manifest.sensors {
            let rel = files
                .recordings
                .get(&sensor.id)
                .ok_or_else(|| data_err(path, 0, format!("user {user:?}: no recording for sensor {:?}", sensor.id)))?;
            recordings.push(read_recording_csv(&root.join(rel), sensor)?);
        }
        let labels = read_labels_csv(&root.join(&files.labels), manifest.num_classes())?;
        users.push(UserData {
            user_id: user.clone(),
            recordings,
            labels,
        });
    }
    Ok(Dataset { manifest, users })
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `dataset` under `dir` in canonical CSV form and returns the
/// manifest path. Values are written with round-trip precision.
pub fn write_dataset_csv(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = dataset.manifest.clone();
    manifest.files.clear();
    for user in &dataset.users {
        let mut files = UserFiles::default();
        for rec in &user.recordings {
            let name = PathBuf::from(format!("{}_{}.csv", sanitize(&user.user_id), sanitize(rec.sensor_id())));
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["timestamp_s".to_string()];
            header.extend((0..rec.dims()).map(|j| format!("dim{j}")));
            w.write_record(&header)?;
            for i in 0..rec.len() {
                let mut row = vec![format!("{:?}", rec.timestamps()[i])];
                row.extend((0..rec.dims()).map(|j| format!("{:?}", rec.value(i, j))));
                w.write_record(&row)?;
            }
            write_atomic(&dir.join(&name), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
            files.recordings.insert(rec.sensor_id().to_string(), name);
        }
        let name = PathBuf::from(format!("{}_labels.csv", sanitize(&user.user_id)));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["start_s", "end_s", "class_index"])?;
        for iv in &user.labels {
            w.write_record([format!("{:?}", iv.start), format!("{:?}", iv.end), iv.class.to_string()])?;
        }
        write_atomic(&dir.join(&name), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        files.labels = name;
        manifest.files.insert(user.user_id.clone(), files);
    }
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}
