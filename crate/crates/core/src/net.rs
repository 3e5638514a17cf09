//! Classifiers over `[x; f]` inputs: the multi-branch split-attention
//! network and the small strided-conv pretraining classifier.
//!
//! Both take a `[5C × L]` input assembled by [`assemble_input`] and return
//! logits; [`probabilities`] applies the softmax.

use std::fmt::Write as _;

use usad_autodiff::{Container, Element, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{dropout, Conv, ConvSpec, Dense, Init, NORM_EPS};
use crate::rng::{self, Rng};

/// Rows of per-channel conditioning features stacked under each signal
/// channel.
pub const FEATURE_ROWS: usize = 4;

fn shape_err<T>(stage: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape { stage, msg: msg.into() })
}

/// Stacks the `[C × L]` window over its `[4C × L]` feature block.
pub fn assemble_input<T: Element>(x: &[f64], f: &[f64], channels: usize, len: usize) -> Result<Tensor<T>> {
    if x.len() != channels * len {
        return shape_err("input", format!("signal has {} values, expected {channels}x{len}", x.len()));
    }
    if f.len() != FEATURE_ROWS * channels * len {
        return shape_err("input", format!("features have {} values, expected {}", f.len(), FEATURE_ROWS * channels * len));
    }
    let mut data = Vec::with_capacity(x.len() + f.len());
    data.extend_from_slice(x);
    data.extend_from_slice(f);
    Ok(Tensor::new(&[(1 + FEATURE_ROWS) * channels, len], data)?.cast())
}

pub fn probabilities<T: Element>(g: &mut Graph<'_, T>, logits: Var) -> Result<Var> {
    Ok(g.softmax(logits, 0)?)
}

/// Where the two attention modules sit relative to the cross-split sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionOrder {
    /// Spatial attention on the splits, temporal attention on the fused map.
    SpatialFirst,
    /// Temporal attention on the splits, spatial attention on the fused map.
    TemporalFirst,
}

impl AttentionOrder {
    pub fn name(self) -> &'static str {
        match self {
            Self::SpatialFirst => "spatial_first",
            Self::TemporalFirst => "temporal_first",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spatial_first" => Ok(Self::SpatialFirst),
            "temporal_first" => Ok(Self::TemporalFirst),
            _ => Err(Error::Config(format!("unknown attention order '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsadConfig {
    pub in_channels: usize,
    pub len: usize,
    pub n_classes: usize,
    /// Cardinal groups K.
    pub cardinality: usize,
    /// Splits per cardinal group R.
    pub radix: usize,
    pub kernels: Vec<usize>,
    /// Feature width of every branch.
    pub channels: usize,
    /// Hidden width per cardinal group in the attention MLPs.
    pub attn_hidden: usize,
    pub spatial_attn: bool,
    pub temporal_attn: bool,
    pub order: AttentionOrder,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl UsadConfig {
    pub fn new(in_channels: usize, len: usize, n_classes: usize) -> Self {
        Self {
            in_channels,
            len,
            n_classes,
            cardinality: 2,
            radix: 2,
            kernels: vec![3, 5, 7],
            channels: 32,
            attn_hidden: 8,
            spatial_attn: true,
            temporal_attn: true,
            order: AttentionOrder::SpatialFirst,
            head_hidden: 128,
            dropout: 0.3,
        }
    }

    /// Feature groups per split convolution, `K·R`.
    pub fn groups(&self) -> usize {
        self.cardinality * self.radix
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.len == 0 || self.n_classes == 0 {
            return bad("network needs nonzero channels, length and classes".into());
        }
        if self.cardinality == 0 || self.radix == 0 {
            return bad("cardinality and radix must be at least 1".into());
        }
        // Each of the K·R split convolutions needs a whole slice of input
        // channels, which is stricter than divisibility by K alone.
        if self.channels == 0 || !self.channels.is_multiple_of(self.groups()) {
            return bad(format!(
                "channels={} must be a positive multiple of K*R={}",
                self.channels,
                self.groups()
            ));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("branch kernels must be odd and nonempty, got {:?}", self.kernels));
        }
        if self.attn_hidden == 0 || self.head_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Channelwise avg/max descriptor, a 7-tap conv and a sigmoid gate over
/// positions.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv,
}

pub const SPATIAL_KERNEL: usize = 7;

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str) -> Result<Self> {
        let spec = ConvSpec::same(2, 1, SPATIAL_KERNEL);
        Ok(Self { conv: Conv::new(store, rng, name, spec, Init::Uniform)? })
    }

    pub fn param_count() -> usize {
        ConvSpec::same(2, 1, SPATIAL_KERNEL).param_count()
    }

    pub fn forward<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let avg = g.channel_avg(x)?;
        let max = g.channel_max(x)?;
        let desc = g.concat(&[avg, max])?;
        let logits = self.conv.forward(g, s, desc)?;
        let map = g.sigmoid(logits)?;
        Ok(g.scale_positions(x, map)?)
    }
}

/// Squeeze-and-excitation over channels with both dense layers grouped by
/// cardinality.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl TemporalAttention {
    fn specs(channels: usize, groups: usize, hidden: usize) -> (ConvSpec, ConvSpec) {
        (
            ConvSpec::same(channels, groups * hidden, 1).groups(groups),
            ConvSpec::same(groups * hidden, channels, 1).groups(groups),
        )
    }

    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, groups: usize, hidden: usize) -> Result<Self> {
        let (a, b) = Self::specs(channels, groups, hidden);
        Ok(Self {
            fc1: Conv::new(store, rng, &format!("{name}.fc1"), a, Init::Uniform)?,
            fc2: Conv::new(store, rng, &format!("{name}.fc2"), b, Init::Uniform)?,
        })
    }

    pub fn param_count(channels: usize, groups: usize, hidden: usize) -> usize {
        let (a, b) = Self::specs(channels, groups, hidden);
        a.param_count() + b.param_count()
    }

    /// Per-channel gate in (0, 1).
    pub fn weights<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.value(x).shape()[0];
        let z = g.global_avg(x)?;
        let z = g.reshape(z, &[c, 1])?;
        let h = self.fc1.forward(g, s, z)?;
        let h = g.gelu(h)?;
        let w = self.fc2.forward(g, s, h)?;
        let w = g.sigmoid(w)?;
        Ok(g.reshape(w, &[c])?)
    }

    pub fn forward<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let w = self.weights(g, s, x)?;
        Ok(g.scale_channels(x, w)?)
    }
}

/// Elementwise sum of equally shaped splits.
pub fn cardinal_sum<T: Element>(g: &mut Graph<'_, T>, splits: &[Var]) -> Result<Var> {
    if splits.is_empty() {
        return shape_err("cardinal_sum", "no splits");
    }
    Ok(g.add_all(splits)?)
}

/// Turns one logit vector per split into per-channel weights: a softmax
/// across splits when there are several, a sigmoid when there is one.
pub fn radix_weights<T: Element>(g: &mut Graph<'_, T>, logits: &[Var]) -> Result<Vec<Var>> {
    match logits {
        [] => shape_err("radix_attention", "no splits"),
        [one] => Ok(vec![g.sigmoid(*one)?]),
        many => {
            let c = g.value(many[0]).numel();
            let rows = many
                .iter()
                .map(|&l| g.reshape(l, &[1, c]))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let stacked = g.concat(&rows)?;
            let a = g.softmax(stacked, 0)?;
            (0..many.len())
                .map(|r| {
                    let row = g.narrow(a, r, 1)?;
                    Ok(g.reshape(row, &[c])?)
                })
                .collect()
        }
    }
}

/// Grouped MLP from the pooled cardinal sum to one logit vector per split.
#[derive(Clone, Debug)]
pub struct RadixAttention {
    pub fc1: Conv,
    pub fc2: Vec<Conv>,
}

impl RadixAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &UsadConfig) -> Result<Self> {
        let (k, d, c) = (cfg.cardinality, cfg.attn_hidden, cfg.channels);
        let fc1 = Conv::new(store, rng, &format!("{name}.fc1"), ConvSpec::same(c, k * d, 1).groups(k), Init::Uniform)?;
        let fc2 = (0..cfg.radix)
            .map(|r| Conv::new(store, rng, &format!("{name}.fc2.{r}"), ConvSpec::same(k * d, c, 1).groups(k), Init::Uniform))
            .collect::<Result<_>>()?;
        Ok(Self { fc1, fc2 })
    }

    pub fn param_count(cfg: &UsadConfig) -> usize {
        let (k, d, c) = (cfg.cardinality, cfg.attn_hidden, cfg.channels);
        ConvSpec::same(c, k * d, 1).groups(k).param_count() + cfg.radix * ConvSpec::same(k * d, c, 1).groups(k).param_count()
    }

    /// Fuses the splits: `V = Σ_r a_r ⊙ U_r` with `a` from [`radix_weights`].
    pub fn forward<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, splits: &[Var]) -> Result<Var> {
        let u = cardinal_sum(g, splits)?;
        let c = g.value(u).shape()[0];
        let pooled = g.global_avg(u)?;
        let pooled = g.reshape(pooled, &[c, 1])?;
        let h = self.fc1.forward(g, s, pooled)?;
        let h = g.gelu(h)?;
        let logits = self
            .fc2
            .iter()
            .map(|fc| {
                let l = fc.forward(g, s, h)?;
                Ok(g.reshape(l, &[c])?)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = radix_weights(g, &logits)?;
        let parts = splits
            .iter()
            .zip(&weights)
            .map(|(&u, &a)| g.scale_channels(u, a))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(g.add_all(&parts)?)
    }
}

/// One branch: grouped split conv, attention, radix fusion, grouped fusion
/// conv and a residual from the block input.
#[derive(Clone, Debug)]
pub struct SplitAttentionBlock {
    pub split: Conv,
    pub spatial: Option<SpatialAttention>,
    pub temporal: Option<TemporalAttention>,
    pub radix: RadixAttention,
    pub fusion: Conv,
    radix_n: usize,
    channels: usize,
    groups: usize,
    order: AttentionOrder,
}

impl SplitAttentionBlock {
    fn split_spec(cfg: &UsadConfig, kernel: usize) -> ConvSpec {
        ConvSpec::same(cfg.channels, cfg.radix * cfg.channels, kernel).groups(cfg.groups())
    }

    fn fusion_spec(cfg: &UsadConfig) -> ConvSpec {
        ConvSpec::same(cfg.channels, cfg.channels, 3).groups(cfg.groups())
    }

    /// Channels the temporal gate sees: every split before the sum, the
    /// fused map after it.
    fn temporal_width(cfg: &UsadConfig) -> usize {
        match cfg.order {
            AttentionOrder::SpatialFirst => cfg.channels,
            AttentionOrder::TemporalFirst => cfg.radix * cfg.channels,
        }
    }

    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &UsadConfig, kernel: usize) -> Result<Self> {
        let split = Conv::new(store, rng, &format!("{name}.split"), Self::split_spec(cfg, kernel), Init::Uniform)?;
        let spatial = if cfg.spatial_attn {
            Some(SpatialAttention::new(store, rng, &format!("{name}.spatial"))?)
        } else {
            None
        };
        let temporal = if cfg.temporal_attn {
            let w = Self::temporal_width(cfg);
            Some(TemporalAttention::new(store, rng, &format!("{name}.temporal"), w, cfg.cardinality, cfg.attn_hidden)?)
        } else {
            None
        };
        let radix = RadixAttention::new(store, rng, &format!("{name}.radix"), cfg)?;
        let fusion = Conv::new(store, rng, &format!("{name}.fusion"), Self::fusion_spec(cfg), Init::Uniform)?;
        Ok(Self {
            split,
            spatial,
            temporal,
            radix,
            fusion,
            radix_n: cfg.radix,
            channels: cfg.channels,
            groups: cfg.groups(),
            order: cfg.order,
        })
    }

    pub fn param_count(cfg: &UsadConfig, kernel: usize) -> usize {
        let spatial = if cfg.spatial_attn { SpatialAttention::param_count() } else { 0 };
        let temporal = if cfg.temporal_attn {
            TemporalAttention::param_count(Self::temporal_width(cfg), cfg.cardinality, cfg.attn_hidden)
        } else {
            0
        };
        Self::split_spec(cfg, kernel).param_count()
            + spatial
            + temporal
            + RadixAttention::param_count(cfg)
            + Self::fusion_spec(cfg).param_count()
    }

    fn pre_sum<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, h: Var) -> Result<Var> {
        match self.order {
            AttentionOrder::SpatialFirst => self.spatial.as_ref().map_or(Ok(h), |a| a.forward(g, s, h)),
            AttentionOrder::TemporalFirst => self.temporal.as_ref().map_or(Ok(h), |a| a.forward(g, s, h)),
        }
    }

    fn post_sum<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, v: Var) -> Result<Var> {
        match self.order {
            AttentionOrder::SpatialFirst => self.temporal.as_ref().map_or(Ok(v), |a| a.forward(g, s, v)),
            AttentionOrder::TemporalFirst => self.spatial.as_ref().map_or(Ok(v), |a| a.forward(g, s, v)),
        }
    }

    pub fn forward<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.split.forward(g, s, x)?;
        let h = g.group_norm(h, self.groups, NORM_EPS)?;
        let h = g.gelu(h)?;
        let h = self.pre_sum(g, s, h)?;
        // Split r holds cardinal groups 0..K in channel order, so slicing
        // C rows at a time lines every split up with the fused layout.
        let splits = (0..self.radix_n)
            .map(|r| g.narrow(h, r * self.channels, self.channels))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let v = self.radix.forward(g, s, &splits)?;
        let v = self.post_sum(g, s, v)?;
        let out = self.fusion.forward(g, s, v)?;
        let out = g.add(out, x)?;
        Ok(g.gelu(out)?)
    }
}

#[derive(Clone, Debug)]
pub struct UsadNet {
    pub cfg: UsadConfig,
    pub store: ParamStore,
    stem: Conv,
    pub blocks: Vec<SplitAttentionBlock>,
    fc1: Dense,
    fc2: Dense,
}

impl UsadNet {
    fn stem_spec(cfg: &UsadConfig) -> ConvSpec {
        ConvSpec::same((1 + FEATURE_ROWS) * cfg.in_channels, cfg.channels, 3)
    }

    pub fn new(cfg: UsadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "usad-init");
        let stem = Conv::new(&mut store, &mut rng, "stem", Self::stem_spec(&cfg), Init::Uniform)?;
        let blocks = cfg
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| SplitAttentionBlock::new(&mut store, &mut rng, &format!("branch{i}"), &cfg, k))
            .collect::<Result<_>>()?;
        let width = cfg.kernels.len() * cfg.channels;
        let fc1 = Dense::new(&mut store, &mut rng, "head.fc1", width, cfg.head_hidden, Init::Uniform)?;
        let fc2 = Dense::new(&mut store, &mut rng, "head.fc2", cfg.head_hidden, cfg.n_classes, Init::Uniform)?;
        Ok(Self { cfg, store, stem, blocks, fc1, fc2 })
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(cfg: &UsadConfig) -> usize {
        let width = cfg.kernels.len() * cfg.channels;
        Self::stem_spec(cfg).param_count()
            + cfg.kernels.iter().map(|&k| SplitAttentionBlock::param_count(cfg, k)).sum::<usize>()
            + Dense::param_count(width, cfg.head_hidden)
            + Dense::param_count(cfg.head_hidden, cfg.n_classes)
    }

    /// Pooled branch features fed to the head.
    pub fn embedding<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, input: Var) -> Result<Var> {
        let shape = g.value(input).shape();
        let want = [(1 + FEATURE_ROWS) * self.cfg.in_channels, self.cfg.len];
        if shape != want {
            return shape_err("input", format!("got {shape:?}, expected {want:?}"));
        }
        let h = self.stem.forward(g, s, input)?;
        let h = g.group_norm(h, self.cfg.groups(), NORM_EPS)?;
        let h = g.gelu(h)?;
        let outs = self
            .blocks
            .iter()
            .map(|b| b.forward(g, s, h))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&outs)?;
        Ok(g.global_avg(cat)?)
    }

    pub fn logits<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        s: &'a ParamStore<T>,
        input: Var,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let z = self.embedding(g, s, input)?;
        let h = self.fc1.forward(g, s, z)?;
        let h = g.gelu(h)?;
        let h = dropout(g, h, self.cfg.dropout, rng)?;
        self.fc2.forward(g, s, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub in_channels: usize,
    pub len: usize,
    pub n_classes: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub conv_blocks: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl PretrainConfig {
    pub fn new(in_channels: usize, len: usize, n_classes: usize) -> Self {
        Self {
            in_channels,
            len,
            n_classes,
            width: 64,
            kernel: 5,
            stride: 2,
            conv_blocks: 3,
            head_hidden: 128,
            dropout: 0.3,
        }
    }

    fn conv_spec(&self, i: usize) -> ConvSpec {
        let c_in = if i == 0 { (1 + FEATURE_ROWS) * self.in_channels } else { self.width };
        ConvSpec { stride: self.stride, ..ConvSpec::same(c_in, self.width, self.kernel) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.len == 0 || self.n_classes == 0 || self.width == 0 || self.head_hidden == 0 {
            return Err(Error::Config("pretrain classifier sizes must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) || self.stride == 0 || self.conv_blocks == 0 {
            return Err(Error::Config("pretrain classifier needs an odd kernel, stride >= 1 and a conv block".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Strided conv stack with a two-layer head.
#[derive(Clone, Debug)]
pub struct PretrainNet {
    pub cfg: PretrainConfig,
    pub store: ParamStore,
    convs: Vec<Conv>,
    fc1: Dense,
    fc2: Dense,
}

impl PretrainNet {
    pub fn new(cfg: PretrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "pretrain-init");
        let convs = (0..cfg.conv_blocks)
            .map(|i| Conv::new(&mut store, &mut rng, &format!("conv{i}"), cfg.conv_spec(i), Init::Uniform))
            .collect::<Result<_>>()?;
        let fc1 = Dense::new(&mut store, &mut rng, "head.fc1", cfg.width, cfg.head_hidden, Init::Uniform)?;
        let fc2 = Dense::new(&mut store, &mut rng, "head.fc2", cfg.head_hidden, cfg.n_classes, Init::Uniform)?;
        Ok(Self { cfg, store, convs, fc1, fc2 })
    }

    /// Per-layer scalar counts in build order.
    pub fn layer_param_counts(cfg: &PretrainConfig) -> Vec<usize> {
        let mut v: Vec<usize> = (0..cfg.conv_blocks).map(|i| cfg.conv_spec(i).param_count()).collect();
        v.push(Dense::param_count(cfg.width, cfg.head_hidden));
        v.push(Dense::param_count(cfg.head_hidden, cfg.n_classes));
        v
    }

    pub fn param_count(cfg: &PretrainConfig) -> usize {
        Self::layer_param_counts(cfg).iter().sum()
    }

    pub fn embedding<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, input: Var) -> Result<Var> {
        let shape = g.value(input).shape();
        let want = [(1 + FEATURE_ROWS) * self.cfg.in_channels, self.cfg.len];
        if shape != want {
            return shape_err("input", format!("got {shape:?}, expected {want:?}"));
        }
        let mut h = input;
        for conv in &self.convs {
            h = conv.forward(g, s, h)?;
            h = g.gelu(h)?;
        }
        Ok(g.global_avg(h)?)
    }

    pub fn logits<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        s: &'a ParamStore<T>,
        input: Var,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let z = self.embedding(g, s, input)?;
        let h = self.fc1.forward(g, s, z)?;
        let h = g.gelu(h)?;
        let h = dropout(g, h, self.cfg.dropout, rng)?;
        self.fc2.forward(g, s, h)
    }
}

/// Either classifier, behind one interface for training and evaluation.
#[derive(Clone, Debug)]
pub enum Classifier {
    Usad(UsadNet),
    Pretrain(PretrainNet),
}

impl Classifier {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usad(_) => "usad",
            Self::Pretrain(_) => "pretrain",
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Self::Usad(n) => &n.store,
            Self::Pretrain(n) => &n.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Usad(n) => &mut n.store,
            Self::Pretrain(n) => &mut n.store,
        }
    }

    /// `(signal channels, length, classes)`.
    pub fn io_shape(&self) -> (usize, usize, usize) {
        match self {
            Self::Usad(n) => (n.cfg.in_channels, n.cfg.len, n.cfg.n_classes),
            Self::Pretrain(n) => (n.cfg.in_channels, n.cfg.len, n.cfg.n_classes),
        }
    }

    pub fn logits<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        s: &'a ParamStore<T>,
        input: Var,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        match self {
            Self::Usad(n) => n.logits(g, s, input, rng),
            Self::Pretrain(n) => n.logits(g, s, input, rng),
        }
    }

    pub fn embedding<'a, T: Element>(&self, g: &mut Graph<'a, T>, s: &'a ParamStore<T>, input: Var) -> Result<Var> {
        match self {
            Self::Usad(n) => n.embedding(g, s, input),
            Self::Pretrain(n) => n.embedding(g, s, input),
        }
    }

    /// Inference-mode class probabilities for one window.
    pub fn predict(&self, x: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        let (c, l, _) = self.io_shape();
        let mut g = Graph::inference();
        let input = g.input(assemble_input(x, f, c, l)?);
        let logits = self.logits(&mut g, self.store(), input, None)?;
        let p = probabilities(&mut g, logits)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Inference-mode pooled features for one window.
    pub fn embed(&self, x: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        let (c, l, _) = self.io_shape();
        let mut g = Graph::inference();
        let input = g.input(assemble_input(x, f, c, l)?);
        let z = self.embedding(&mut g, self.store(), input)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn config_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").expect("string write");
        kv("kind", self.kind().into());
        match self {
            Self::Usad(n) => {
                let c = &n.cfg;
                kv("in_channels", c.in_channels.to_string());
                kv("len", c.len.to_string());
                kv("n_classes", c.n_classes.to_string());
                kv("cardinality", c.cardinality.to_string());
                kv("radix", c.radix.to_string());
                kv("kernels", c.kernels.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
                kv("channels", c.channels.to_string());
                kv("attn_hidden", c.attn_hidden.to_string());
                kv("spatial_attn", c.spatial_attn.to_string());
                kv("temporal_attn", c.temporal_attn.to_string());
                kv("order", c.order.name().into());
                kv("head_hidden", c.head_hidden.to_string());
                kv("dropout", c.dropout.to_string());
            }
            Self::Pretrain(n) => {
                let c = &n.cfg;
                kv("in_channels", c.in_channels.to_string());
                kv("len", c.len.to_string());
                kv("n_classes", c.n_classes.to_string());
                kv("width", c.width.to_string());
                kv("kernel", c.kernel.to_string());
                kv("stride", c.stride.to_string());
                kv("conv_blocks", c.conv_blocks.to_string());
                kv("head_hidden", c.head_hidden.to_string());
                kv("dropout", c.dropout.to_string());
            }
        }
        out
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        let map: std::collections::BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_once('=').ok_or_else(|| Error::Config(format!("bad classifier config line '{l}'"))))
            .collect::<Result<_>>()?;
        let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::Config(format!("classifier config lacks '{k}'")));
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("classifier config '{k}={v}' is not valid")))
        }
        let n = |k: &str| -> Result<usize> { num(k, get(k)?) };
        match get("kind")? {
            "usad" => {
                let cfg = UsadConfig {
                    in_channels: n("in_channels")?,
                    len: n("len")?,
                    n_classes: n("n_classes")?,
                    cardinality: n("cardinality")?,
                    radix: n("radix")?,
                    kernels: get("kernels")?.split(',').map(|k| num("kernels", k)).collect::<Result<_>>()?,
                    channels: n("channels")?,
                    attn_hidden: n("attn_hidden")?,
                    spatial_attn: num("spatial_attn", get("spatial_attn")?)?,
                    temporal_attn: num("temporal_attn", get("temporal_attn")?)?,
                    order: AttentionOrder::parse(get("order")?)?,
                    head_hidden: n("head_hidden")?,
                    dropout: num("dropout", get("dropout")?)?,
                };
                Ok(Self::Usad(UsadNet::new(cfg, 0)?))
            }
            "pretrain" => {
                let cfg = PretrainConfig {
                    in_channels: n("in_channels")?,
                    len: n("len")?,
                    n_classes: n("n_classes")?,
                    width: n("width")?,
                    kernel: n("kernel")?,
                    stride: n("stride")?,
                    conv_blocks: n("conv_blocks")?,
                    head_hidden: n("head_hidden")?,
                    dropout: num("dropout", get("dropout")?)?,
                };
                Ok(Self::Pretrain(PretrainNet::new(cfg, 0)?))
            }
            other => Err(Error::Config(format!("unknown classifier kind '{other}'"))),
        }
    }

    pub fn write_to(&self, c: &mut Container) {
        c.push_text("meta/classifier", &self.config_text());
        c.push_params("classifier/", self.store());
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        let text = c
            .text("meta/classifier")
            .ok_or_else(|| Error::Data("checkpoint has no classifier".into()))?;
        let mut net = Self::from_config_text(&text)?;
        c.load_params("classifier/", net.store_mut())?;
        Ok(net)
    }
}

/// Trainable scalar count of a built model.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.num_scalars()
}

/// Weight bytes at `T` width plus the activation bytes of one inference
/// window.
pub fn estimate_memory<T: Element>(model: &Classifier) -> Result<MemoryEstimate> {
    let store = model.store().cast::<T>();
    let (c, l, _) = model.io_shape();
    let mut g = Graph::<T>::inference();
    let input = g.input(Tensor::zeros(&[(1 + FEATURE_ROWS) * c, l]));
    let logits = model.logits(&mut g, &store, input, None)?;
    probabilities(&mut g, logits)?;
    Ok(MemoryEstimate { weight_bytes: store.size_bytes(), activation_bytes: g.activation_bytes() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub weight_bytes: usize,
    pub activation_bytes: usize,
}

impl MemoryEstimate {
    pub fn total(&self) -> usize {
        self.weight_bytes + self.activation_bytes
    }
}
