//! Inference latency against a per-segment budget, plus model footprint.

use std::fmt::Write as _;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use usad_autodiff::{Element, Graph, ParamStore};

use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::net::{assemble_input, estimate_memory, probabilities, Classifier, MemoryEstimate};

/// Share of the segment duration one inference may take.
pub const BUDGET_SHARE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyBudget {
    pub segment_seconds: f64,
}

impl LatencyBudget {
    pub fn new(segment_seconds: f64) -> Result<Self> {
        if !(segment_seconds > 0.0) || !segment_seconds.is_finite() {
            return Err(Error::Config(format!("segment length must be positive, got {segment_seconds}")));
        }
        Ok(Self { segment_seconds })
    }

    pub fn budget_ms(&self) -> f64 {
        self.segment_seconds * 1000.0 * BUDGET_SHARE
    }
}

/// Anything that maps one window to class probabilities.
pub trait InferenceModel {
    fn name(&self) -> &str;
    fn infer(&self, sample: &SequenceSample) -> Result<Vec<f64>>;
    fn param_count(&self) -> usize {
        0
    }
    fn memory_bytes(&self) -> usize {
        0
    }
}

/// Does nothing; isolates harness overhead.
pub struct EmptyModel;

impl InferenceModel for EmptyModel {
    fn name(&self) -> &str {
        "empty"
    }

    fn infer(&self, _: &SequenceSample) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

/// Sleeps for a fixed time per call.
pub struct SleepStub {
    pub delay: Duration,
}

impl InferenceModel for SleepStub {
    fn name(&self) -> &str {
        "sleep-stub"
    }

    fn infer(&self, _: &SequenceSample) -> Result<Vec<f64>> {
        thread::sleep(self.delay);
        Ok(Vec::new())
    }
}

/// A classifier evaluated at element type `T` (weights cast once).
pub struct TypedModel<'m, T: Element> {
    model: &'m Classifier,
    store: ParamStore<T>,
    name: String,
    memory: MemoryEstimate,
}

impl<'m, T: Element> TypedModel<'m, T> {
    pub fn new(model: &'m Classifier) -> Result<Self> {
        let name = format!("{}-f{}", model.kind(), 8 * T::DTYPE.width());
        Ok(Self { model, store: model.store().cast(), name, memory: estimate_memory::<T>(model)? })
    }
}

impl<T: Element> InferenceModel for TypedModel<'_, T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn infer(&self, s: &SequenceSample) -> Result<Vec<f64>> {
        let (c, l, _) = self.model.io_shape();
        let mut g = Graph::<T>::inference();
        let input = g.input(assemble_input(&s.x, &s.f, c, l)?);
        let logits = self.model.logits(&mut g, &self.store, input, None)?;
        let p = probabilities(&mut g, logits)?;
        Ok(g.value(p).to_f64_vec())
    }

    fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn memory_bytes(&self) -> usize {
        self.memory.total()
    }
}

/// `(parameter count, weight + activation bytes)` at element type `T`.
pub fn footprint<T: Element>(model: &Classifier) -> Result<(usize, MemoryEstimate)> {
    Ok((model.store().num_scalars(), estimate_memory::<T>(model)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { reps: 100, warmup: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub model: String,
    /// Wall time of each timed window, in stream order.
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub budget_ms: f64,
    pub params: usize,
    pub memory_bytes: usize,
}

impl LatencyReport {
    /// Pass iff p95 is within budget.
    pub fn passes(&self) -> bool {
        self.p95_ms <= self.budget_ms
    }

    pub fn verdict(&self) -> &'static str {
        if self.passes() {
            "pass"
        } else {
            "fail"
        }
    }

    pub fn total_ms(&self) -> f64 {
        self.times_ms.iter().sum()
    }

    pub fn from_times(model: &str, times_ms: Vec<f64>, budget: LatencyBudget, params: usize, memory_bytes: usize) -> Result<Self> {
        if times_ms.is_empty() {
            return Err(Error::Invalid("no timings".into()));
        }
        let mut sorted = times_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean_ms = times_ms.iter().sum::<f64>() / n as f64;
        let median_ms = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Ok(Self {
            model: model.to_string(),
            mean_ms: mean_ms.clamp(sorted[0], sorted[n - 1]),
            median_ms,
            p95_ms: percentile(&sorted, 0.95),
            min_ms: sorted[0],
            max_ms: sorted[n - 1],
            budget_ms: budget.budget_ms(),
            params,
            memory_bytes,
            times_ms,
        })
    }

    pub const COLUMNS: [&'static str; 10] =
        ["model", "row", "ms", "mean_ms", "median_ms", "p95_ms", "budget_ms", "verdict", "params", "memory_bytes"];

    /// Long format: one row per timed window, then one `summary` row.
    pub fn to_csv(&self) -> String {
        let mut out = Self::COLUMNS.join(",");
        out.push('\n');
        for (i, t) in self.times_ms.iter().enumerate() {
            writeln!(out, "{},{i},{t},,,,,,,", self.model).expect("string write");
        }
        writeln!(
            out,
            "{},summary,,{},{},{},{},{},{},{}",
            self.model,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.budget_ms,
            self.verdict(),
            self.params,
            self.memory_bytes
        )
        .expect("string write");
        out
    }
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `reps` single-window inferences over `stream` (cycling if the
/// stream is shorter) after `warmup` untimed calls. Runs on the calling
/// thread only.
pub fn measure_latency(
    model: &dyn InferenceModel,
    stream: &[SequenceSample],
    budget: LatencyBudget,
    cfg: BenchConfig,
) -> Result<LatencyReport> {
    if stream.is_empty() {
        return Err(Error::Data("latency bench needs at least one window".into()));
    }
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    for i in 0..cfg.warmup {
        model.infer(&stream[i % stream.len()])?;
    }
    let mut times = Vec::with_capacity(cfg.reps);
    for i in 0..cfg.reps {
        let s = &stream[i % stream.len()];
        let t0 = Instant::now();
        let out = model.infer(s)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    LatencyReport::from_times(model.name(), times, budget, model.param_count(), model.memory_bytes())
}

pub fn emit_report(report: &LatencyReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

/// Runs every model over the same stream and measures the empty-model
/// overhead separately.
pub fn bench_models(
    models: &[&dyn InferenceModel],
    stream: &[SequenceSample],
    budget: LatencyBudget,
    cfg: BenchConfig,
) -> Result<(LatencyReport, Vec<LatencyReport>)> {
    let overhead = measure_latency(&EmptyModel, stream, budget, cfg)?;
    let reports = models
        .iter()
        .map(|m| measure_latency(*m, stream, budget, cfg))
        .collect::<Result<_>>()?;
    Ok((overhead, reports))
}
