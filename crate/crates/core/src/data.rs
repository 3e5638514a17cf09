//! Recording ingestion, sliding windows, labelled window datasets, splits
//! and the synthetic toy dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::stats::{condition_features, DEFAULT_EPS};

/// Column layout of a recording CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    pub has_header: bool,
    pub subject_col: usize,
    pub label_col: usize,
    pub channel_cols: Vec<usize>,
    pub channel_names: Vec<String>,
    pub sample_rate: f64,
}

impl Schema {
    /// Raw WISDM layout: `user,activity,timestamp,x,y,z;` without a header.
    pub fn wisdm() -> Self {
        Self {
            has_header: false,
            subject_col: 0,
            label_col: 1,
            channel_cols: vec![3, 4, 5],
            channel_names: vec!["x".into(), "y".into(), "z".into()],
            sample_rate: 20.0,
        }
    }

    /// Layout written by [`export_recording`].
    pub fn exported(channel_names: &[String], sample_rate: f64) -> Self {
        Self {
            has_header: true,
            subject_col: 0,
            label_col: 1,
            channel_cols: (2..2 + channel_names.len()).collect(),
            channel_names: channel_names.to_vec(),
            sample_rate,
        }
    }
}

/// A continuous multi-channel recording with a label and subject per step.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub subjects: Vec<String>,
    pub sample_rate: f64,
    /// Malformed input rows skipped during ingestion.
    pub skipped: usize,
}

impl RawRecording {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits into per-subject recordings in order of first appearance.
    /// Non-contiguous rows of one subject are concatenated.
    pub fn split_by_subject(&self) -> Vec<RawRecording> {
        let mut order: Vec<&str> = Vec::new();
        let mut rows: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.subjects.iter().enumerate() {
            rows.entry(s).or_insert_with(|| {
                order.push(s);
                Vec::new()
            });
            rows.get_mut(s.as_str()).unwrap().push(i);
        }
        order
            .into_iter()
            .map(|s| {
                let idx = &rows[s];
                RawRecording {
                    channel_names: self.channel_names.clone(),
                    channels: self.channels.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
                    labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
                    subjects: vec![s.to_string(); idx.len()],
                    sample_rate: self.sample_rate,
                    skipped: 0,
                }
            })
            .collect()
    }
}

/// Reads a recording, skipping malformed rows. More than 1% malformed rows
/// is an error.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<RawRecording> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_str(&text, schema).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn ingest_str(text: &str, schema: &Schema) -> Result<RawRecording> {
    if schema.channel_cols.is_empty() || schema.channel_cols.len() != schema.channel_names.len() {
        return Err(Error::Config("schema needs one name per channel column".into()));
    }
    let needed = schema
        .channel_cols
        .iter()
        .chain([&schema.subject_col, &schema.label_col])
        .max()
        .copied()
        .unwrap_or(0)
        + 1;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    if schema.has_header {
        let width = reader.headers()?.len();
        if width < needed {
            return Err(Error::Data(format!("header has {width} columns, schema needs {needed}")));
        }
    }
    let mut rec = RawRecording {
        channel_names: schema.channel_names.clone(),
        channels: vec![Vec::new(); schema.channel_cols.len()],
        labels: Vec::new(),
        subjects: Vec::new(),
        sample_rate: schema.sample_rate,
        skipped: 0,
    };
    let mut rows = 0usize;
    let mut values = Vec::with_capacity(schema.channel_cols.len());
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                rows += 1;
                rec.skipped += 1;
                continue;
            }
        };
        if row.iter().all(|f| f.is_empty() || f == ";") {
            continue;
        }
        rows += 1;
        let field = |i: usize| row.get(i).map(|f| f.trim_end_matches(';').trim());
        values.clear();
        let parsed = schema.channel_cols.iter().try_for_each(|&c| {
            let v: f64 = field(c).filter(|f| !f.is_empty())?.parse().ok()?;
            v.is_finite().then(|| values.push(v))
        });
        let (subject, label) = (field(schema.subject_col), field(schema.label_col));
        match (parsed, subject, label) {
            (Some(()), Some(s), Some(l)) if !l.is_empty() => {
                for (ch, v) in rec.channels.iter_mut().zip(&values) {
                    ch.push(*v);
                }
                rec.subjects.push(s.to_string());
                rec.labels.push(l.to_string());
            }
            _ => rec.skipped += 1,
        }
    }
    if rows == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    if rec.skipped * 100 > rows {
        return Err(Error::Data(format!("{} of {rows} rows malformed (limit 1%)", rec.skipped)));
    }
    Ok(rec)
}

/// Writes a recording in the [`Schema::exported`] layout.
pub fn export_recording(rec: &RawRecording, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject".to_string(), "label".to_string()];
    header.extend(rec.channel_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..rec.len() {
        let mut row = vec![rec.subjects[i].clone(), rec.labels[i].clone()];
        row.extend(rec.channels.iter().map(|c| c[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRule {
    /// Most frequent label; ties go to the label seen first in the window.
    Majority,
    /// Drop windows that contain more than one label.
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub len: usize,
    pub step: usize,
    pub rule: LabelRule,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.step == 0 || self.step > self.len {
            return Err(Error::Config(format!("window step {} must lie in [1, {}]", self.step, self.len)));
        }
        Ok(())
    }

    /// Number of windows over `n` samples.
    pub fn count(&self, n: usize) -> usize {
        if n < self.len {
            0
        } else {
            (n - self.len) / self.step + 1
        }
    }
}

/// One window cut from a recording, before label indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub offset: usize,
    /// Channel-major `[C × L]` values.
    pub x: Vec<f64>,
    pub label: String,
}

pub fn window(rec: &RawRecording, spec: &WindowSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    if rec.len() < spec.len {
        return Err(Error::Data(format!("recording of {} samples is shorter than window {}", rec.len(), spec.len)));
    }
    let mut out = Vec::with_capacity(spec.count(rec.len()));
    for k in 0..spec.count(rec.len()) {
        let off = k * spec.step;
        let labels = &rec.labels[off..off + spec.len];
        let label = match spec.rule {
            LabelRule::Strict if labels.iter().any(|l| l != &labels[0]) => continue,
            LabelRule::Strict => labels[0].clone(),
            LabelRule::Majority => majority(labels),
        };
        let x = rec.channels.iter().flat_map(|c| c[off..off + spec.len].iter().copied()).collect();
        out.push(Window { offset: off, x, label });
    }
    Ok(out)
}

fn majority(labels: &[String]) -> String {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(k, _)| *k == l) {
            Some(e) => e.1 += 1,
            None => counts.push((l, 1)),
        }
    }
    // `counts` is in order of first appearance, so the first maximum wins.
    let best = counts.iter().fold(counts[0], |b, &c| if c.1 > b.1 { c } else { b });
    best.0.to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Real,
    Synthetic,
}

/// A window with its class index and conditioning features.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// Channel-major `[C × L]`.
    pub x: Vec<f64>,
    pub y: usize,
    /// Per-channel conditioning vectors, length `4·C·L`.
    pub f: Vec<f64>,
    pub source: Source,
}

impl SequenceSample {
    pub fn new(x: Vec<f64>, y: usize, channels: usize, source: Source) -> Result<Self> {
        let f = condition_features(&x, channels, DEFAULT_EPS)?;
        Ok(Self { x, y, f, source })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub len: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn empty(channels: usize, len: usize, class_names: Vec<String>) -> Self {
        Self { channels, len, class_names, samples: Vec::new() }
    }

    /// Indexes window labels. Class indices follow `class_names` when given,
    /// otherwise the sorted set of labels seen.
    pub fn from_windows(windows: Vec<Window>, channels: usize, class_names: Option<Vec<String>>) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::Data("no windows".into()));
        };
        let len = first.x.len() / channels;
        let class_names = class_names.unwrap_or_else(|| {
            windows.iter().map(|w| w.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()
        });
        let mut samples = Vec::with_capacity(windows.len());
        for w in windows {
            if w.x.len() != channels * len {
                return Err(Error::Data(format!("window of {} values, expected {}", w.x.len(), channels * len)));
            }
            let y = class_names
                .iter()
                .position(|c| *c == w.label)
                .ok_or_else(|| Error::Data(format!("unknown class `{}`", w.label)))?;
            samples.push(SequenceSample::new(w.x, y, channels, Source::Real)?);
        }
        Ok(Self { channels, len, class_names, samples })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes()];
        for s in &self.samples {
            c[s.y] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            channels: self.channels,
            len: self.len,
            class_names: self.class_names.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// SHA-256 over shape, class names, labels, sources and value bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.channels as u64).to_le_bytes());
        h.update((self.len as u64).to_le_bytes());
        for c in &self.class_names {
            h.update((c.len() as u64).to_le_bytes());
            h.update(c.as_bytes());
        }
        for s in &self.samples {
            h.update((s.y as u64).to_le_bytes());
            h.update([matches!(s.source, Source::Synthetic) as u8]);
            for v in &s.x {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes one row per window (`label,synthetic,v0..`) plus a
    /// `<path>.shape` sidecar with channels, length and class order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string(), "synthetic".to_string()];
        header.extend((0..self.channels * self.len).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let flag = u8::from(s.source == Source::Synthetic).to_string();
            let mut row = vec![self.class_names[s.y].clone(), flag];
            row.extend(s.x.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = format!(
            "channels={}\nlen={}\nclasses={}\n",
            self.channels,
            self.len,
            self.class_names.join(",")
        );
        let side = shape_path(path);
        fs::write(&side, sidecar).map_err(|e| Error::io(&side, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = shape_path(path);
        let meta = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut kv = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("{}: bad line `{line}`", side.display())))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Data(format!("{}: missing `{k}`", side.display())));
        let parse = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Data(format!("{}: `{k}` is not an integer", side.display())))
        };
        let (channels, len) = (parse("channels")?, parse("len")?);
        let class_names: Vec<String> = get("classes")?.split(',').map(str::to_string).collect();
        let mut ds = Dataset::empty(channels, len, class_names);
        let mut reader = csv::Reader::from_path(path)?;
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let bad = |what: &str| Error::Data(format!("{} row {}: {what}", path.display(), i + 1));
            if row.len() != 2 + channels * len {
                return Err(bad(&format!("{} fields, expected {}", row.len(), 2 + channels * len)));
            }
            let y = ds.class_names.iter().position(|c| c == &row[0]).ok_or_else(|| bad("unknown class"))?;
            let source = match &row[1] {
                "0" => Source::Real,
                "1" => Source::Synthetic,
                _ => return Err(bad("synthetic flag must be 0 or 1")),
            };
            let x = row.iter().skip(2).map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("bad value"))?;
            ds.samples.push(SequenceSample::new(x, y, channels, source)?);
        }
        Ok(ds)
    }
}

fn shape_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".shape");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Splits by `(train, val, test)` ratios. Stratified mode applies the ratios
/// per class. Each split keeps the original sample order.
pub fn split(data: &Dataset, ratios: [f64; 3], seed: u64, stratify: bool) -> Result<Splits> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let mut rng = rng::stream(seed, "split");
    let groups: Vec<Vec<usize>> = if stratify {
        let mut by_class = vec![Vec::new(); data.n_classes()];
        for (i, s) in data.samples.iter().enumerate() {
            by_class[s.y].push(i);
        }
        let needed = ratios.iter().filter(|&&r| r > 0.0).count();
        for (c, idx) in by_class.iter().enumerate() {
            if !idx.is_empty() && idx.len() < needed {
                return Err(Error::Data(format!(
                    "class `{}` has {} samples, fewer than the {needed} requested splits",
                    data.class_names[c],
                    idx.len()
                )));
            }
        }
        by_class
    } else {
        vec![(0..data.len()).collect()]
    };
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut idx in groups {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
        let n_val = if ratios[2] == 0.0 { n - n_train } else { n_val };
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(Splits { train: data.subset(&parts[0]), val: data.subset(&parts[1]), test: data.subset(&parts[2]) })
}

/// Per-channel standardisation fitted on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return invalid("cannot fit normalisation on an empty split");
        }
        let (c, l) = (data.channels, data.len);
        let n = (data.len() * l) as f64;
        let mut mean = vec![0.0; c];
        for s in &data.samples {
            for ch in 0..c {
                mean[ch] += s.x[ch * l..(ch + 1) * l].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for s in &data.samples {
            for ch in 0..c {
                var[ch] += s.x[ch * l..(ch + 1) * l].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(1e-8)).collect();
        Ok(Self { mean, std })
    }

    /// Standardises every window and recomputes its conditioning features.
    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        let l = data.len;
        for s in &mut data.samples {
            for ch in 0..data.channels {
                for v in &mut s.x[ch * l..(ch + 1) * l] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
            s.f = condition_features(&s.x, data.channels, DEFAULT_EPS)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImbalanceReport {
    pub counts: Vec<usize>,
    pub shares: Vec<f64>,
    /// Largest over smallest class count (infinite if a class is empty).
    pub ratio: f64,
    /// Shannon entropy of the label distribution in nats.
    pub entropy: f64,
}

pub fn imbalance_report(counts: &[usize]) -> Result<ImbalanceReport> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return invalid("imbalance report of an empty dataset");
    }
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let (max, min) = (counts.iter().max().unwrap(), counts.iter().min().unwrap());
    let ratio = if *min == 0 { f64::INFINITY } else { *max as f64 / *min as f64 };
    let entropy = -shares.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Ok(ImbalanceReport { counts: counts.to_vec(), shares, ratio, entropy })
}

/// Sinusoid classes: class `c` has `c + 1` cycles per window, amplitude
/// `1 + c/2` and offset `c/2`, plus white noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub classes: usize,
    pub len: usize,
    pub per_class: usize,
    pub noise: f64,
    /// Majority-to-minority count ratio; class 0 is the majority, the last
    /// class the minority, and classes in between interpolate geometrically.
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { classes: 2, len: 32, per_class: 100, noise: 0.2, imbalance: 1.0, seed: 0 }
    }
}

impl ToySpec {
    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.classes)
            .map(|c| {
                let frac = if self.classes > 1 { c as f64 / (self.classes - 1) as f64 } else { 0.0 };
                ((self.per_class as f64 / self.imbalance.powf(frac)).round() as usize).max(1)
            })
            .collect()
    }
}

pub fn make_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return invalid("toy dataset needs at least two classes");
    }
    if spec.len == 0 || spec.per_class == 0 || !(spec.imbalance >= 1.0) || !(spec.noise >= 0.0) {
        return invalid(format!("bad toy spec {spec:?}"));
    }
    let mut rng = rng::stream(spec.seed, "toy");
    let names = (0..spec.classes).map(|c| format!("class{c}")).collect();
    let mut ds = Dataset::empty(1, spec.len, names);
    for (c, n) in spec.class_sizes().into_iter().enumerate() {
        let (cycles, amp, offset) = ((c + 1) as f64, 1.0 + 0.5 * c as f64, 0.5 * c as f64);
        for _ in 0..n {
            let noise = rng::normal_vec(&mut rng, spec.len);
            let x = (0..spec.len)
                .map(|t| {
                    let phase = std::f64::consts::TAU * cycles * t as f64 / spec.len as f64;
                    offset + amp * phase.sin() + spec.noise * noise[t]
                })
                .collect();
            ds.samples.push(SequenceSample::new(x, c, 1, Source::Real)?);
        }
    }
    Ok(ds)
}
