//! Cosine-ratio noise schedule, forward noising, the label- and
//! time-modulated denoiser, its weighted training objective, and ancestral
//! sampling of class-balanced synthetic windows.

use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use rayon::prelude::*;
use usad_autodiff::{Adam, Container, Graph, Optimizer, ParamId, ParamStore, Tensor, Var};

use crate::data::{Dataset, SequenceSample, Source};
use crate::error::{invalid, Error, Result};
use crate::nn::{mean_gradients, Conv, ConvSpec, Dense, Init, NORM_EPS};
use crate::rng::{self, Rng};
use crate::stats::PrototypeTable;

/// Floor inside the importance-weight square root; keeps `w_1` finite.
pub const WEIGHT_EPS: f64 = 1e-8;
pub const TIME_EMBED_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `cos(..) / cos(..)` with no square.
    CosineRatio,
    /// The squared variant common in other diffusion code.
    SquaredCosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub offset: f64,
    pub kind: ScheduleKind,
    /// Index 0..=T.
    pub alpha_bar: Vec<f64>,
    /// `beta[t - 1]` is the value for step `t`.
    pub beta: Vec<f64>,
    /// `weight[t - 1]` is the importance weight for step `t`.
    pub weight: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, offset: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return invalid("schedule needs at least one step");
        }
        if !(offset > 0.0 && offset < 1.0) {
            return invalid(format!("schedule offset must lie in (0, 1), got {offset}"));
        }
        let f = |t: usize| {
            let c = (FRAC_PI_2 * (t as f64 / steps as f64 + offset) / (1.0 + offset)).cos();
            match kind {
                ScheduleKind::CosineRatio => c,
                ScheduleKind::SquaredCosine => c * c,
            }
        };
        let f0 = f(0);
        let alpha_bar: Vec<f64> = (0..=steps).map(|t| if t == 0 { 1.0 } else { f(t) / f0 }).collect();
        let beta = (1..=steps).map(|t| (1.0 - alpha_bar[t] / alpha_bar[t - 1]).clamp(0.0, 0.999)).collect();
        let weight = (1..=steps)
            .map(|t| ((1.0 - alpha_bar[t]) / (alpha_bar[t] * (1.0 - alpha_bar[t - 1]) + WEIGHT_EPS)).sqrt())
            .collect();
        Ok(Self { steps, offset, kind, alpha_bar, beta, weight })
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn weight_at(&self, t: usize) -> f64 {
        self.weight[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return invalid(format!("step {t} outside 1..={}", self.steps));
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`.
pub fn forward_diffuse(x0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != noise.len() {
        return invalid(format!("signal of {} values vs noise of {}", x0.len(), noise.len()));
    }
    let (a, b) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

/// Sinusoidal embedding: entries `2i`, `2i+1` are sin and cos of
/// `t / 10000^(2i/128)`.
pub fn time_embedding(t: usize) -> Vec<f64> {
    let mut e = Vec::with_capacity(TIME_EMBED_DIM);
    for i in 0..TIME_EMBED_DIM / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / TIME_EMBED_DIM as f64);
        let a = t as f64 / freq;
        e.push(a.sin());
        e.push(a.cos());
    }
    e
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &[f64], y: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub len: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub groups: usize,
    pub label_dim: usize,
    pub embed_dim: usize,
}

impl DenoiserConfig {
    pub fn new(channels: usize, len: usize, n_classes: usize) -> Self {
        Self { channels, len, n_classes, hidden: 32, blocks: 3, kernel: 5, groups: 8, label_dim: 32, embed_dim: 64 }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.groups == 0 || !self.hidden.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "denoiser width {} not divisible into {} norm groups",
                self.hidden, self.groups
            )));
        }
        if self.kernel.is_multiple_of(2) || self.channels == 0 || self.len == 0 || self.n_classes == 0 {
            return Err(Error::Config(format!("bad denoiser config {self:?}")));
        }
        Ok(())
    }
}

/// Group normalisation whose per-channel scale and shift are projected
/// from the shared label/time embedding.
#[derive(Clone, Debug)]
struct AdaGn {
    proj: Dense,
}

impl AdaGn {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, embed: usize, channels: usize) -> Result<Self> {
        let proj = Dense::new(store, rng, name, embed, 2 * channels, Init::Uniform)?;
        // Start near the identity modulation: gamma ≈ 1, beta ≈ 0.
        let w = store.get_mut(proj.w);
        w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        let b = store.get_mut(proj.b).data_mut();
        b[..channels].iter_mut().for_each(|v| *v = 1.0);
        b[channels..].iter_mut().for_each(|v| *v = 0.0);
        Ok(Self { proj })
    }

    fn forward<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, h: Var, emb: Var, groups: usize) -> Result<Var> {
        let c = g.value(h).shape()[0];
        let gb = self.proj.forward(g, s, emb)?;
        let gamma = g.narrow(gb, 0, c)?;
        let beta = g.narrow(gb, c, c)?;
        adagn_modulate(g, h, gamma, beta, groups)
    }
}

/// `gamma ⊙ groupnorm(h) + beta` with per-channel `gamma`, `beta`.
pub fn adagn_modulate(g: &mut Graph<'_>, h: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
    let n = g.group_norm(h, groups, NORM_EPS)?;
    let scaled = g.scale_channels(n, gamma)?;
    Ok(g.shift_channels(scaled, beta)?)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: AdaGn,
    conv1: Conv,
    norm2: AdaGn,
    conv2: Conv,
}

/// Residual conv net predicting the noise of a `[C × L]` window from the
/// noisy window, its conditioning features, the step and the label.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    labels: ParamId,
    embed: Dense,
    conv_in: Conv,
    blocks: Vec<ResBlock>,
    conv_out: Conv,
    /// `sqrt(1 − ᾱ_t)` per step, index 0..=T.
    skip: Vec<f64>,
}

impl DenoiserNet {
    pub fn new(cfg: DenoiserConfig, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "denoiser-init");
        let mut s = ParamStore::new();
        let h = cfg.hidden;
        let label_init: Vec<f64> = rng::normal_vec(&mut rng, cfg.n_classes * cfg.label_dim);
        let labels = s.add("label_embed", Tensor::new(&[cfg.n_classes, cfg.label_dim], label_init)?)?;
        let embed = Dense::new(&mut s, &mut rng, "embed", cfg.label_dim + TIME_EMBED_DIM, cfg.embed_dim, Init::Uniform)?;
        let conv_in = Conv::new(&mut s, &mut rng, "conv_in", ConvSpec::same(5 * cfg.channels, h, cfg.kernel), Init::Uniform)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("block{b}");
            blocks.push(ResBlock {
                norm1: AdaGn::new(&mut s, &mut rng, &format!("{p}.norm1"), cfg.embed_dim, h)?,
                conv1: Conv::new(&mut s, &mut rng, &format!("{p}.conv1"), ConvSpec::same(h, h, cfg.kernel), Init::Uniform)?,
                norm2: AdaGn::new(&mut s, &mut rng, &format!("{p}.norm2"), cfg.embed_dim, h)?,
                conv2: Conv::new(&mut s, &mut rng, &format!("{p}.conv2"), ConvSpec::same(h, h, cfg.kernel), Init::Uniform)?,
            });
        }
        let conv_out = Conv::new(&mut s, &mut rng, "conv_out", ConvSpec::same(h, cfg.channels, cfg.kernel), Init::Zero)?;
        let skip = sched.alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self { cfg, store: s, labels, embed, conv_in, blocks, conv_out, skip })
    }

    /// Shared label/time embedding `gelu(W·[e_y; ψ(t)] + b)`.
    fn embedding<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, t: usize, y: usize) -> Result<Var> {
        if y >= self.cfg.n_classes {
            return invalid(format!("label {y} outside {} classes", self.cfg.n_classes));
        }
        let table = g.param(s, self.labels);
        let row = g.narrow(table, y, 1)?;
        let e_y = g.reshape(row, &[self.cfg.label_dim])?;
        let psi = g.input(Tensor::from_vec(time_embedding(t)));
        let joint = g.concat(&[e_y, psi])?;
        let pre = self.embed.forward(g, s, joint)?;
        Ok(g.gelu(pre)?)
    }

    /// Noise prediction for `x_t: [C × L]` with conditioning `cond` of
    /// length `4·C·L`. `s` must be this net's store (or a clone of it).
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        s: &'a ParamStore,
        x_t: Var,
        t: usize,
        cond: &[f64],
        y: usize,
    ) -> Result<Var> {
        let (c, l) = (self.cfg.channels, self.cfg.len);
        if cond.len() != 4 * c * l || g.value(x_t).numel() != c * l {
            return Err(Error::Shape {
                stage: "denoiser input",
                msg: format!("expected {c}x{l} window and {} features, got {} and {}", 4 * c * l, g.value(x_t).numel(), cond.len()),
            });
        }
        let emb = self.embedding(g, s, t, y)?;
        let f = g.input(Tensor::new(&[4 * c, l], cond.to_vec())?);
        let x = g.reshape(x_t, &[c, l])?;
        let inp = g.concat(&[x, f])?;
        let mut h = self.conv_in.forward(g, s, inp)?;
        for b in &self.blocks {
            let a = b.norm1.forward(g, s, h, emb, self.cfg.groups)?;
            let a = g.gelu(a)?;
            let a = b.conv1.forward(g, s, a)?;
            let a = b.norm2.forward(g, s, a, emb, self.cfg.groups)?;
            let a = g.gelu(a)?;
            let a = b.conv2.forward(g, s, a)?;
            h = g.add(h, a)?;
        }
        let out = self.conv_out.forward(g, s, h)?;
        let skip = g.scale(x, self.skip[t])?;
        Ok(g.add(out, skip)?)
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn write_to(&self, c: &mut Container) {
        c.push_params("denoiser/", &self.store);
    }

    pub fn read_from(cfg: DenoiserConfig, sched: &NoiseSchedule, c: &Container) -> Result<Self> {
        let mut net = Self::new(cfg, sched, 0)?;
        c.load_params("denoiser/", &mut net.store)?;
        Ok(net)
    }
}

impl NoisePredictor for DenoiserNet {
    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &[f64], y: usize) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(&[self.cfg.channels, self.cfg.len], x_t.to_vec())?);
        let out = self.forward(&mut g, &self.store, x, t, cond, y)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Scale each sample's error by the schedule's importance weight.
    Importance,
    Uniform,
}

impl Weighting {
    pub fn at(self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Weighting::Importance => sched.weight_at(t),
            Weighting::Uniform => 1.0,
        }
    }
}

/// The training objective for one draw, evaluated without a tape:
/// `w_t·‖ε − ε̂(x_t, t, f, y)‖²`.
pub fn denoising_loss(
    pred: &impl NoisePredictor,
    sched: &NoiseSchedule,
    weighting: Weighting,
    sample: &SequenceSample,
    t: usize,
    noise: &[f64],
) -> Result<f64> {
    let x_t = forward_diffuse(&sample.x, t, noise, sched)?;
    let eps = pred.predict_noise(&x_t, t, &sample.f, sample.y)?;
    let err: f64 = eps.iter().zip(noise).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(weighting.at(sched, t) * err)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weighting: Weighting,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 2e-3, batch_size: 32, weighting: Weighting::Importance, seed: 0 }
    }
}

struct NoisyItem<'d> {
    sample: &'d SequenceSample,
    t: usize,
    x_t: Vec<f64>,
    noise: Vec<f64>,
    weight: f64,
}

/// Minimises the (optionally importance-weighted) squared noise error with
/// Adam. Returns the mean training loss per epoch.
pub fn train_denoiser(
    net: &mut DenoiserNet,
    data: &Dataset,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return invalid("cannot train the denoiser on an empty dataset");
    }
    if data.channels != net.cfg.channels || data.len != net.cfg.len {
        return Err(Error::Shape {
            stage: "train_denoiser",
            msg: format!("data is {}x{}, denoiser expects {}x{}", data.channels, data.len, net.cfg.channels, net.cfg.len),
        });
    }
    let mut opt = Adam::new(cfg.lr)?;
    let mut rng = rng::stream(cfg.seed, "denoiser-train");
    let mut trace = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let items: Vec<NoisyItem> = chunk
                .iter()
                .map(|&i| {
                    let sample = &data.samples[i];
                    let t = rng.random_range(1..=sched.steps);
                    let noise = rng::normal_vec(&mut rng, sample.x.len());
                    let x_t = forward_diffuse(&sample.x, t, &noise, sched)?;
                    let weight = cfg.weighting.at(sched, t);
                    Ok(NoisyItem { sample, t, x_t, noise, weight })
                })
                .collect::<Result<_>>()?;
            let this: &DenoiserNet = net;
            let (loss, grads) = mean_gradients(&this.store, &items, |g, s, it| {
                let x = g.input(Tensor::new(&[this.cfg.channels, this.cfg.len], it.x_t.clone())?);
                let pred = this.forward(g, s, x, it.t, &it.sample.f, it.sample.y)?;
                let target = g.input(Tensor::new(g.value(pred).shape(), it.noise.clone())?);
                let diff = g.sub(pred, target)?;
                let sq = g.square(diff)?;
                let total = g.sum(sq)?;
                Ok(g.scale(total, it.weight)?)
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "diffusion", epoch });
            }
            opt.step(&mut net.store, &grads).map_err(|e| match e {
                usad_autodiff::Error::NonFiniteGradient(_) => Error::Diverged { stage: "diffusion", epoch },
                other => other.into(),
            })?;
            epoch_loss += loss * chunk.len() as f64;
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    Ok(trace)
}

/// One ancestral step from `x_t` to `x_{t-1}`; `z` is ignored at `t = 1`.
pub fn reverse_step(x_t: &[f64], eps: &[f64], t: usize, z: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    let beta = sched.beta_at(t);
    let coef = beta / (1.0 - sched.alpha_bar[t]).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
    x_t.iter()
        .zip(eps)
        .zip(z)
        .map(|((x, e), zv)| (x - coef * e) * inv + sigma * zv)
        .collect()
}

/// Draws one synthetic window of label `y`, conditioning every step on the
/// label's prototype features.
pub fn sample(
    pred: &impl NoisePredictor,
    sched: &NoiseSchedule,
    y: usize,
    proto: &PrototypeTable,
    numel: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cond = proto.get(y)?;
    if cond.len() != 4 * numel {
        return invalid(format!("prototype of length {} for windows of {numel} values", cond.len()));
    }
    let mut rng = rng::stream(seed, "sample");
    let mut x = rng::normal_vec(&mut rng, numel);
    for t in (1..=sched.steps).rev() {
        let eps = pred.predict_noise(&x, t, cond, y)?;
        let z = rng::normal_vec(&mut rng, numel);
        x = reverse_step(&x, &eps, t, &z, sched);
    }
    Ok(x)
}

/// Label sequence for `m` synthetic samples: round-robin over the classes,
/// so every class gets `m / n` or `m / n + 1`, then shuffled.
pub fn balanced_labels(m: usize, labels: &[usize], seed: u64) -> Vec<usize> {
    let mut ys: Vec<usize> = (0..m).map(|i| labels[i % labels.len()]).collect();
    rand::seq::SliceRandom::shuffle(&mut ys[..], &mut rng::stream(seed, "synth-labels"));
    ys
}

/// `m` class-balanced synthetic windows with recomputed conditioning
/// features. Chains run in parallel, each with its own seed.
pub fn synthesize_dataset(
    pred: &impl NoisePredictor,
    sched: &NoiseSchedule,
    proto: &PrototypeTable,
    template: &Dataset,
    m: usize,
    seed: u64,
) -> Result<Dataset> {
    if m == 0 {
        return invalid("synthetic sample count must be positive");
    }
    let labels: Vec<usize> = proto.labels().collect();
    let ys = balanced_labels(m, &labels, seed);
    let numel = template.channels * template.len;
    let samples: Vec<Result<SequenceSample>> = ys
        .par_iter()
        .enumerate()
        .map(|(i, &y)| {
            let chain_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let x = sample(pred, sched, y, proto, numel, chain_seed)?;
            SequenceSample::new(x, y, template.channels, Source::Synthetic)
        })
        .collect();
    let mut ds = Dataset::empty(template.channels, template.len, template.class_names.clone());
    ds.samples = samples.into_iter().collect::<Result<_>>()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::new(1000, 0.008, ScheduleKind::CosineRatio).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar[1000].abs() < 1e-12);
        assert_eq!(s.beta_at(1000), 0.999);
        assert!(NoiseSchedule::new(0, 0.008, ScheduleKind::CosineRatio).is_err());
        assert!(NoiseSchedule::new(10, 1.0, ScheduleKind::CosineRatio).is_err());
    }

    #[test]
    fn squared_variant_is_the_square() {
        let a = NoiseSchedule::new(20, 0.008, ScheduleKind::CosineRatio).unwrap();
        let b = NoiseSchedule::new(20, 0.008, ScheduleKind::SquaredCosine).unwrap();
        for t in 0..=20 {
            assert!((a.alpha_bar[t].powi(2) - b.alpha_bar[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(3);
        assert_eq!(e.len(), 128);
        assert_eq!(e[0], 3f64.sin());
        assert_eq!(e[1], 3f64.cos());
        assert_eq!(e[2], (3.0 / 10000f64.powf(2.0 / 128.0)).sin());
    }

    #[test]
    fn forward_diffuse_rejects_bad_step() {
        let s = NoiseSchedule::new(10, 0.008, ScheduleKind::CosineRatio).unwrap();
        assert!(forward_diffuse(&[1.0], 0, &[0.0], &s).is_err());
        assert!(forward_diffuse(&[1.0], 11, &[0.0], &s).is_err());
    }

    #[test]
    fn balanced_histogram() {
        let ys = balanced_labels(9, &[0, 1, 2], 4);
        for c in 0..3 {
            assert_eq!(ys.iter().filter(|&&y| y == c).count(), 3);
        }
    }

    #[test]
    fn denoiser_output_shape_and_zero_init() {
        let cfg = DenoiserConfig { hidden: 8, blocks: 1, groups: 2, label_dim: 4, embed_dim: 8, ..DenoiserConfig::new(2, 6, 3) };
        let sched = NoiseSchedule::new(5, 0.008, ScheduleKind::CosineRatio).unwrap();
        let net = DenoiserNet::new(cfg, &sched, 1).unwrap();
        let out = net.predict_noise(&[0.5; 12], 3, &[0.1; 48], 2).unwrap();
        let skip = 0.5 * (1.0 - sched.alpha_bar[3]).sqrt();
        assert!(out.iter().all(|&v| v == skip));
        assert!(net.predict_noise(&[0.5; 12], 3, &[0.1; 48], 3).is_err());
    }
}
