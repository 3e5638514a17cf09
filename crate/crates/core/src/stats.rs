//! Per-sequence moments, z-scores, conditioning vectors and per-label
//! prototypes.

use std::collections::BTreeMap;

use usad_autodiff::{Container, EntryData, Tensor};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct StatFeatures {
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub z: Vec<f64>,
}

/// Population moments and z-scores of one channel. A spread at or below
/// `eps` yields an all-zero `z` and zero skewness.
pub fn compute_stats(x: &[f64], eps: f64) -> Result<StatFeatures> {
    if x.is_empty() {
        return invalid("compute_stats on an empty sequence");
    }
    if !(eps > 0.0) {
        return invalid(format!("compute_stats eps must be positive, got {eps}"));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return invalid(format!("non-finite value {} at index {i}", x[i]));
    }
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma <= eps {
        return Ok(StatFeatures { mu, sigma, gamma: 0.0, z: vec![0.0; x.len()] });
    }
    let z: Vec<f64> = x.iter().map(|v| (v - mu) / sigma).collect();
    let gamma = z.iter().map(|v| v * v * v).sum::<f64>() / n;
    Ok(StatFeatures { mu, sigma, gamma, z })
}

/// Length-4L vector `[mu; L | sigma; L | gamma; L | z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Sequence length L.
    pub fn seq_len(&self) -> usize {
        self.0.len() / 4
    }

    /// The four length-L blocks.
    pub fn blocks(&self) -> [&[f64]; 4] {
        let l = self.seq_len();
        [&self.0[..l], &self.0[l..2 * l], &self.0[2 * l..3 * l], &self.0[3 * l..]]
    }
}

pub fn build_condition_vector(s: &StatFeatures) -> ConditionVector {
    let l = s.z.len();
    let mut f = Vec::with_capacity(4 * l);
    f.extend(std::iter::repeat_n(s.mu, l));
    f.extend(std::iter::repeat_n(s.sigma, l));
    f.extend(std::iter::repeat_n(s.gamma, l));
    f.extend_from_slice(&s.z);
    ConditionVector(f)
}

/// Conditioning features of a channel-major `[C × L]` window: one
/// [`ConditionVector`] per channel, concatenated (length 4·C·L).
pub fn condition_features(x: &[f64], channels: usize, eps: f64) -> Result<Vec<f64>> {
    if channels == 0 || !x.len().is_multiple_of(channels) {
        return invalid(format!("{} values do not split into {channels} channels", x.len()));
    }
    let len = x.len() / channels;
    let mut f = Vec::with_capacity(4 * x.len());
    for c in 0..channels {
        let s = compute_stats(&x[c * len..(c + 1) * len], eps)?;
        f.extend(build_condition_vector(&s).into_vec());
    }
    Ok(f)
}

/// Mean conditioning vector per label.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable {
    dim: usize,
    protos: BTreeMap<usize, Vec<f64>>,
    counts: BTreeMap<usize, usize>,
}

impl PrototypeTable {
    pub fn fit<'a>(samples: impl IntoIterator<Item = (&'a [f64], usize)>) -> Result<Self> {
        let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut dim = None;
        for (f, y) in samples {
            let d = *dim.get_or_insert(f.len());
            if f.len() != d {
                return invalid(format!("prototype inputs mix lengths {d} and {}", f.len()));
            }
            let acc = sums.entry(y).or_insert_with(|| vec![0.0; d]);
            acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
            *counts.entry(y).or_default() += 1;
        }
        let Some(dim) = dim else {
            return invalid("cannot fit prototypes on an empty dataset");
        };
        let protos = sums
            .into_iter()
            .map(|(y, mut s)| {
                let n = counts[&y] as f64;
                s.iter_mut().for_each(|v| *v /= n);
                (y, s)
            })
            .collect();
        Ok(Self { dim, protos, counts })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, label: usize) -> Result<&[f64]> {
        self.protos.get(&label).map(Vec::as_slice).ok_or(Error::MissingLabel(label))
    }

    pub fn count(&self, label: usize) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.protos.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    /// Stores each prototype as `proto/<label>` plus a count table.
    pub fn write_to(&self, c: &mut Container) {
        for (y, p) in &self.protos {
            c.push(format!("proto/{y}"), EntryData::F64(Tensor::from_slice(p)));
        }
        let counts: Vec<String> = self.counts.iter().map(|(y, n)| format!("{y}:{n}")).collect();
        c.push_text("meta/proto_counts", &counts.join(","));
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        let mut protos = BTreeMap::new();
        for e in c.entries.iter().filter(|e| e.name.starts_with("proto/")) {
            let y: usize = e.name["proto/".len()..]
                .parse()
                .map_err(|_| Error::Data(format!("bad prototype entry name `{}`", e.name)))?;
            let t = e.data.as_f64().ok_or_else(|| Error::Data(format!("`{}` is not numeric", e.name)))?;
            protos.insert(y, t.into_data());
        }
        let mut counts = BTreeMap::new();
        for item in c.text("meta/proto_counts").unwrap_or_default().split(',').filter(|s| !s.is_empty()) {
            let parsed = item
                .split_once(':')
                .and_then(|(y, n)| Some((y.parse().ok()?, n.parse().ok()?)));
            let (y, n): (usize, usize) = parsed.ok_or_else(|| Error::Data(format!("bad prototype count `{item}`")))?;
            counts.insert(y, n);
        }
        let dim = protos.values().next().map(Vec::len).ok_or_else(|| Error::Data("no prototypes stored".into()))?;
        if protos.keys().any(|y| counts.get(y).is_none_or(|&n| n == 0)) {
            return Err(Error::Data("prototype without a positive count".into()));
        }
        Ok(Self { dim, protos, counts })
    }
}
