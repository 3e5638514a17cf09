//! Run configuration as flat `dotted.key=value` text.
//!
//! Every key has a default except `seed`. Unknown keys are rejected, and
//! [`RunConfig::to_text`] writes every key in a fixed order so the output is
//! a complete, replayable snapshot.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::{LabelRule, ToySpec, WindowSpec};
use crate::diffusion::{DenoiserConfig, DiffusionTrainConfig, ScheduleKind, Weighting};
use crate::error::{Error, Result};
use crate::losses::{ClassBalancedParams, CompositeLossState, FocalParams, LossConfig};
use crate::net::{AttentionOrder, PretrainConfig, UsadConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Toy,
    /// Raw sensor CSV, windowed on load.
    Csv,
    /// Already windowed dataset CSV with its shape sidecar.
    Windows,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Usad,
    Pretrain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data_source: DataSource,
    pub data_path: String,
    pub data_schema: String,
    pub data_sample_rate: f64,
    pub toy: ToySpec,
    pub window: WindowSpec,
    pub split_ratios: [f64; 3],
    pub split_stratify: bool,
    pub normalize: bool,
    pub diffusion_steps: usize,
    pub diffusion_offset: f64,
    pub diffusion_schedule: ScheduleKind,
    pub diffusion_weighting: Weighting,
    pub diffusion_hidden: usize,
    pub diffusion_blocks: usize,
    pub diffusion_kernel: usize,
    pub diffusion_groups: usize,
    pub diffusion: StageConfig,
    pub augmentation: bool,
    /// Synthetic sample count; `None` means the real training-set size.
    pub synth_m: Option<usize>,
    pub model_kind: ModelKind,
    pub model_cardinality: usize,
    pub model_radix: usize,
    pub model_kernels: Vec<usize>,
    pub model_channels: usize,
    pub model_attn_hidden: usize,
    pub model_spatial_attn: bool,
    pub model_temporal_attn: bool,
    pub model_order: AttentionOrder,
    pub model_head_hidden: usize,
    pub model_dropout: f64,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    /// Synthetic windows mixed into fine-tuning per real window.
    pub finetune_synthetic_ratio: f64,
    pub loss_smoothing: f64,
    pub loss_focal_gamma: f64,
    pub loss_focal_alpha: f64,
    pub loss_omega: [f64; 3],
    pub loss_tau: f64,
    pub loss_temperature: f64,
    pub loss_bounds: (f64, f64),
    pub loss_adaptive: bool,
    pub loss_cb_weight: f64,
    pub loss_cb_beta: f64,
    pub eval_ece_bins: usize,
    pub resume: bool,
    pub force: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let state = CompositeLossState::default();
        Self {
            seed: None,
            data_source: DataSource::Toy,
            data_path: String::new(),
            data_schema: "wisdm".into(),
            data_sample_rate: 20.0,
            toy: ToySpec { classes: 3, len: 32, per_class: 60, noise: 0.3, imbalance: 1.0, seed: 0 },
            window: WindowSpec { len: 90, step: 45, rule: LabelRule::Majority },
            split_ratios: [0.7, 0.15, 0.15],
            split_stratify: true,
            normalize: true,
            diffusion_steps: 50,
            diffusion_offset: 0.008,
            diffusion_schedule: ScheduleKind::CosineRatio,
            diffusion_weighting: DiffusionTrainConfig::default().weighting,
            diffusion_hidden: 32,
            diffusion_blocks: 3,
            diffusion_kernel: 5,
            diffusion_groups: 8,
            diffusion: StageConfig { epochs: 30, lr: 2e-3, batch_size: 32 },
            augmentation: true,
            synth_m: None,
            model_kind: ModelKind::Usad,
            model_cardinality: 2,
            model_radix: 2,
            model_kernels: vec![3, 5, 7],
            model_channels: 16,
            model_attn_hidden: 8,
            model_spatial_attn: true,
            model_temporal_attn: true,
            model_order: AttentionOrder::SpatialFirst,
            model_head_hidden: 128,
            model_dropout: 0.3,
            pretrain: StageConfig { epochs: 10, lr: 2e-3, batch_size: 32 },
            finetune: StageConfig { epochs: 30, lr: 1e-3, batch_size: 32 },
            finetune_synthetic_ratio: 0.0,
            loss_smoothing: loss.smoothing,
            loss_focal_gamma: loss.focal.gamma,
            loss_focal_alpha: loss.focal.alpha,
            loss_omega: state.omega,
            loss_tau: state.tau,
            loss_temperature: state.temperature,
            loss_bounds: state.bounds,
            loss_adaptive: true,
            loss_cb_weight: loss.cb_weight,
            loss_cb_beta: loss.class_balanced.beta,
            eval_ece_bins: 15,
            resume: false,
            force: false,
        }
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{v}' for {key}, expected true or false"))),
    }
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    v.split(',').map(|p| parse(key, p)).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let xs: Vec<f64> = parse_list(key, v)?;
    xs.try_into()
        .map_err(|_| Error::Config(format!("{key} needs three comma-separated values")))
}

fn join<V: Display>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every recognised key, in snapshot order.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let stage = |s: &StageConfig| [s.epochs.to_string(), s.lr.to_string(), s.batch_size.to_string()];
        let [de, dl, db] = stage(&self.diffusion);
        let [pe, pl, pb] = stage(&self.pretrain);
        let [fe, fl, fb] = stage(&self.finetune);
        vec![
            ("seed", self.seed.map_or(String::new(), |s| s.to_string())),
            ("data.source", match self.data_source {
                DataSource::Toy => "toy",
                DataSource::Csv => "csv",
                DataSource::Windows => "windows",
            }
            .into()),
            ("data.path", self.data_path.clone()),
            ("data.schema", self.data_schema.clone()),
            ("data.sample_rate", self.data_sample_rate.to_string()),
            ("toy.classes", self.toy.classes.to_string()),
            ("toy.len", self.toy.len.to_string()),
            ("toy.per_class", self.toy.per_class.to_string()),
            ("toy.noise", self.toy.noise.to_string()),
            ("toy.imbalance", self.toy.imbalance.to_string()),
            ("window.len", self.window.len.to_string()),
            ("window.step", self.window.step.to_string()),
            ("window.rule", match self.window.rule {
                LabelRule::Majority => "majority",
                LabelRule::Strict => "strict",
            }
            .into()),
            ("split.ratios", join(&self.split_ratios)),
            ("split.stratify", self.split_stratify.to_string()),
            ("data.normalize", self.normalize.to_string()),
            ("diffusion.T", self.diffusion_steps.to_string()),
            ("diffusion.s", self.diffusion_offset.to_string()),
            ("diffusion.schedule", match self.diffusion_schedule {
                ScheduleKind::CosineRatio => "cosine_ratio",
                ScheduleKind::SquaredCosine => "squared_cosine",
            }
            .into()),
            ("diffusion.weighting", match self.diffusion_weighting {
                Weighting::Importance => "importance",
                Weighting::Uniform => "uniform",
            }
            .into()),
            ("diffusion.hidden", self.diffusion_hidden.to_string()),
            ("diffusion.blocks", self.diffusion_blocks.to_string()),
            ("diffusion.kernel", self.diffusion_kernel.to_string()),
            ("diffusion.groups", self.diffusion_groups.to_string()),
            ("diffusion.epochs", de),
            ("diffusion.lr", dl),
            ("diffusion.batch_size", db),
            ("augmentation", self.augmentation.to_string()),
            ("synth.m", self.synth_m.map_or("auto".into(), |m| m.to_string())),
            ("model.kind", match self.model_kind {
                ModelKind::Usad => "usad",
                ModelKind::Pretrain => "pretrain",
            }
            .into()),
            ("model.K", self.model_cardinality.to_string()),
            ("model.R", self.model_radix.to_string()),
            ("model.kernels", join(&self.model_kernels)),
            ("model.channels", self.model_channels.to_string()),
            ("model.attn_hidden", self.model_attn_hidden.to_string()),
            ("model.spatial_attn", self.model_spatial_attn.to_string()),
            ("model.temporal_attn", self.model_temporal_attn.to_string()),
            ("model.order", self.model_order.name().into()),
            ("model.head_hidden", self.model_head_hidden.to_string()),
            ("model.dropout", self.model_dropout.to_string()),
            ("pretrain.epochs", pe),
            ("pretrain.lr", pl),
            ("pretrain.batch_size", pb),
            ("finetune.epochs", fe),
            ("finetune.lr", fl),
            ("finetune.batch_size", fb),
            ("finetune.synthetic_ratio", self.finetune_synthetic_ratio.to_string()),
            ("loss.smoothing", self.loss_smoothing.to_string()),
            ("loss.focal_gamma", self.loss_focal_gamma.to_string()),
            ("loss.focal_alpha", self.loss_focal_alpha.to_string()),
            ("loss.omega", join(&self.loss_omega)),
            ("loss.tau", self.loss_tau.to_string()),
            ("loss.temperature", self.loss_temperature.to_string()),
            ("loss.w_min", self.loss_bounds.0.to_string()),
            ("loss.w_max", self.loss_bounds.1.to_string()),
            ("loss.adaptive", self.loss_adaptive.to_string()),
            ("loss.cb_weight", self.loss_cb_weight.to_string()),
            ("loss.cb_beta", self.loss_cb_beta.to_string()),
            ("eval.ece_bins", self.eval_ece_bins.to_string()),
            ("run.resume", self.resume.to_string()),
            ("run.force", self.force.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "data.source" => {
                self.data_source = match v {
                    "toy" => DataSource::Toy,
                    "csv" => DataSource::Csv,
                    "windows" => DataSource::Windows,
                    _ => return Err(Error::Config(format!("invalid value '{v}' for {key}, expected toy, csv or windows"))),
                }
            }
            "data.path" => self.data_path = v.to_string(),
            "data.schema" => {
                if v != "wisdm" && v != "exported" {
                    return Err(Error::Config(format!("invalid value '{v}' for {key}, expected wisdm or exported")));
                }
                self.data_schema = v.to_string();
            }
            "data.sample_rate" => self.data_sample_rate = parse(key, v)?,
            "toy.classes" => self.toy.classes = parse(key, v)?,
            "toy.len" => self.toy.len = parse(key, v)?,
            "toy.per_class" => self.toy.per_class = parse(key, v)?,
            "toy.noise" => self.toy.noise = parse(key, v)?,
            "toy.imbalance" => self.toy.imbalance = parse(key, v)?,
            "window.len" => self.window.len = parse(key, v)?,
            "window.step" => self.window.step = parse(key, v)?,
            "window.rule" => {
                self.window.rule = match v {
                    "majority" => LabelRule::Majority,
                    "strict" => LabelRule::Strict,
                    _ => return Err(Error::Config(format!("invalid value '{v}' for {key}, expected majority or strict"))),
                }
            }
            "split.ratios" => self.split_ratios = parse_triple(key, v)?,
            "split.stratify" => self.split_stratify = parse_bool(key, v)?,
            "data.normalize" => self.normalize = parse_bool(key, v)?,
            "diffusion.T" => self.diffusion_steps = parse(key, v)?,
            "diffusion.s" => self.diffusion_offset = parse(key, v)?,
            "diffusion.schedule" => {
                self.diffusion_schedule = match v {
                    "cosine_ratio" => ScheduleKind::CosineRatio,
                    "squared_cosine" => ScheduleKind::SquaredCosine,
                    _ => return Err(Error::Config(format!("invalid value '{v}' for {key}, expected cosine_ratio or squared_cosine"))),
                }
            }
            "diffusion.weighting" => {
                self.diffusion_weighting = match v {
                    "importance" => Weighting::Importance,
                    "uniform" => Weighting::Uniform,
                    _ => return Err(Error::Config(format!("invalid value '{v}' for {key}, expected importance or uniform"))),
                }
            }
            "diffusion.hidden" => self.diffusion_hidden = parse(key, v)?,
            "diffusion.blocks" => self.diffusion_blocks = parse(key, v)?,
            "diffusion.kernel" => self.diffusion_kernel = parse(key, v)?,
            "diffusion.groups" => self.diffusion_groups = parse(key, v)?,
            "diffusion.epochs" => self.diffusion.epochs = parse(key, v)?,
            "diffusion.lr" => self.diffusion.lr = parse(key, v)?,
            "diffusion.batch_size" => self.diffusion.batch_size = parse(key, v)?,
            "augmentation" => self.augmentation = parse_bool(key, v)?,
            "synth.m" => self.synth_m = if v == "auto" { None } else { Some(parse(key, v)?) },
            "model.kind" => {
                self.model_kind = match v {
                    "usad" => ModelKind::Usad,
                    "pretrain" => ModelKind::Pretrain,
                    _ => return Err(Error::Config(format!("invalid value '{v}' for {key}, expected usad or pretrain"))),
                }
            }
            "model.K" => self.model_cardinality = parse(key, v)?,
            "model.R" => self.model_radix = parse(key, v)?,
            "model.kernels" => self.model_kernels = parse_list(key, v)?,
            "model.channels" => self.model_channels = parse(key, v)?,
            "model.attn_hidden" => self.model_attn_hidden = parse(key, v)?,
            "model.spatial_attn" => self.model_spatial_attn = parse_bool(key, v)?,
            "model.temporal_attn" => self.model_temporal_attn = parse_bool(key, v)?,
            "model.order" => self.model_order = AttentionOrder::parse(v)?,
            "model.head_hidden" => self.model_head_hidden = parse(key, v)?,
            "model.dropout" => self.model_dropout = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "finetune.epochs" => self.finetune.epochs = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.batch_size" => self.finetune.batch_size = parse(key, v)?,
            "finetune.synthetic_ratio" => self.finetune_synthetic_ratio = parse(key, v)?,
            "loss.smoothing" => self.loss_smoothing = parse(key, v)?,
            "loss.focal_gamma" => self.loss_focal_gamma = parse(key, v)?,
            "loss.focal_alpha" => self.loss_focal_alpha = parse(key, v)?,
            "loss.omega" => self.loss_omega = parse_triple(key, v)?,
            "loss.tau" => self.loss_tau = parse(key, v)?,
            "loss.temperature" => self.loss_temperature = parse(key, v)?,
            "loss.w_min" => self.loss_bounds.0 = parse(key, v)?,
            "loss.w_max" => self.loss_bounds.1 = parse(key, v)?,
            "loss.adaptive" => self.loss_adaptive = parse_bool(key, v)?,
            "loss.cb_weight" => self.loss_cb_weight = parse(key, v)?,
            "loss.cb_beta" => self.loss_cb_beta = parse(key, v)?,
            "eval.ece_bins" => self.eval_ece_bins = parse(key, v)?,
            "run.resume" => self.resume = parse_bool(key, v)?,
            "run.force" => self.force = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines over the current values. `#` starts a
    /// comment; blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("seed is required (set seed=<n>)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        match self.data_source {
            DataSource::Toy => {}
            DataSource::Csv | DataSource::Windows if self.data_path.is_empty() => {
                return Err(Error::Config("data.path is required unless data.source=toy".into()));
            }
            _ => {}
        }
        if self.data_source == DataSource::Csv {
            self.window.validate()?;
        }
        for (name, s) in [("diffusion", &self.diffusion), ("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if !(s.lr > 0.0) || s.batch_size == 0 {
                return Err(Error::Config(format!("{name}: lr and batch_size must be positive")));
            }
        }
        if !(self.finetune_synthetic_ratio >= 0.0) {
            return Err(Error::Config("finetune.synthetic_ratio must be nonnegative".into()));
        }
        if self.eval_ece_bins == 0 {
            return Err(Error::Config("eval.ece_bins must be at least 1".into()));
        }
        self.loss_state()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            smoothing: self.loss_smoothing,
            focal: FocalParams { gamma: self.loss_focal_gamma, alpha: self.loss_focal_alpha },
            class_balanced: ClassBalancedParams { beta: self.loss_cb_beta },
            cb_weight: self.loss_cb_weight,
        }
    }

    pub fn loss_state(&self) -> Result<CompositeLossState> {
        CompositeLossState::new(self.loss_omega, self.loss_tau, self.loss_temperature, self.loss_bounds)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn denoiser_config(&self, channels: usize, len: usize, n_classes: usize) -> DenoiserConfig {
        DenoiserConfig {
            hidden: self.diffusion_hidden,
            blocks: self.diffusion_blocks,
            kernel: self.diffusion_kernel,
            groups: self.diffusion_groups,
            ..DenoiserConfig::new(channels, len, n_classes)
        }
    }

    pub fn usad_config(&self, channels: usize, len: usize, n_classes: usize) -> UsadConfig {
        UsadConfig {
            cardinality: self.model_cardinality,
            radix: self.model_radix,
            kernels: self.model_kernels.clone(),
            channels: self.model_channels,
            attn_hidden: self.model_attn_hidden,
            spatial_attn: self.model_spatial_attn,
            temporal_attn: self.model_temporal_attn,
            order: self.model_order,
            head_hidden: self.model_head_hidden,
            dropout: self.model_dropout,
            ..UsadConfig::new(channels, len, n_classes)
        }
    }

    pub fn pretrain_net_config(&self, channels: usize, len: usize, n_classes: usize) -> PretrainConfig {
        PretrainConfig {
            head_hidden: self.model_head_hidden,
            dropout: self.model_dropout,
            ..PretrainConfig::new(channels, len, n_classes)
        }
    }
}
