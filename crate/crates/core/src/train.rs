//! Classifier training and evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use usad_autodiff::{Adam, Graph, Optimizer};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{class_balanced_scales, composite_loss, CompositeLossState, LossConfig};
use crate::metrics::{argmax, Evaluation};
use crate::net::{assemble_input, Classifier};
use crate::nn::mean_gradients;
use crate::rng;

/// What the classifier minimises.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Plain cross-entropy (synthetic pretraining).
    CrossEntropy,
    /// Weighted smoothing/focal/CE sum; `adaptive` turns the per-epoch
    /// controller on, otherwise the weights stay at `state.omega`.
    Composite { loss: LossConfig, state: CompositeLossState, adaptive: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
    pub ece_bins: usize,
}

impl ClassifierTrainConfig {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self { epochs, lr, batch_size: 32, seed, objective: Objective::CrossEntropy, ece_bins: 15 }
    }
}

/// One epoch of training.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy the controller saw: validation when available, else train.
    pub acc: f64,
    /// Loss weights used during this epoch.
    pub omega: [f64; 3],
    pub val: Option<Evaluation>,
}

/// Inference-mode probabilities for every sample, in order.
pub fn predict_all(model: &Classifier, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples.par_iter().map(|s| model.predict(&s.x, &s.f)).collect()
}

pub fn evaluate(model: &Classifier, data: &Dataset, bins: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let probs = predict_all(model, data)?;
    Evaluation::from_probs(&probs, &data.labels(), data.n_classes(), bins)
}

pub fn accuracy(model: &Classifier, data: &Dataset) -> Result<f64> {
    let probs = predict_all(model, data)?;
    let hits = probs.iter().zip(data.samples.iter()).filter(|(p, s)| argmax(p).0 == s.y).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

struct Item {
    idx: usize,
    omega: [f64; 3],
    cb_scale: f64,
    dropout_seed: u64,
}

/// Mini-batch Adam on `train`. The objective's state is updated in place
/// so the caller sees the final loss weights. `on_epoch` runs after every
/// epoch, e.g. to append a log row.
pub fn train_classifier(
    model: &mut Classifier,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &mut ClassifierTrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let (c, l, n_classes) = model.io_shape();
    if train.is_empty() {
        return Err(Error::Data("cannot train a classifier on an empty dataset".into()));
    }
    if train.channels != c || train.len != l || train.n_classes() != n_classes {
        return Err(Error::Shape {
            stage: "train_classifier",
            msg: format!(
                "data is {}x{} with {} classes, model expects {c}x{l} with {n_classes}",
                train.channels,
                train.len,
                train.n_classes()
            ),
        });
    }
    let val = val.filter(|v| !v.is_empty());
    let cb_scales = match &cfg.objective {
        Objective::Composite { loss, .. } if loss.cb_weight != 0.0 => {
            class_balanced_scales(&train.labels(), &train.class_counts(), loss.class_balanced)?
        }
        _ => vec![1.0; train.len()],
    };
    let mut opt = Adam::new(cfg.lr)?;
    let mut rng = rng::stream(cfg.seed, "classifier-train");
    let batch = cfg.batch_size.max(1);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let omega = match &cfg.objective {
            Objective::CrossEntropy => [0.0, 0.0, 1.0],
            Objective::Composite { state, .. } => state.omega,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let items: Vec<Item> = chunk
                .iter()
                .map(|&idx| Item { idx, omega, cb_scale: cb_scales[idx], dropout_seed: rand::Rng::random(&mut rng) })
                .collect();
            let net: &Classifier = model;
            let objective = &cfg.objective;
            let (loss, grads) = mean_gradients(net.store(), &items, |g: &mut Graph<'_>, s, it| {
                let sample = &train.samples[it.idx];
                let input = g.input(assemble_input(&sample.x, &sample.f, c, l)?);
                let mut drng = rng::stream(it.dropout_seed, "dropout");
                let logits = net.logits(g, s, input, Some(&mut drng))?;
                match objective {
                    Objective::CrossEntropy => {
                        let logp = g.log_softmax(logits, 0)?;
                        let lp = g.select(logp, sample.y)?;
                        Ok(g.neg(lp)?)
                    }
                    Objective::Composite { loss, .. } => composite_loss(g, logits, sample.y, it.omega, loss, it.cb_scale),
                }
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "classifier", epoch });
            }
            opt.step(model.store_mut(), &grads).map_err(|e| match e {
                usad_autodiff::Error::NonFiniteGradient(_) => Error::Diverged { stage: "classifier", epoch },
                other => other.into(),
            })?;
            total += loss * chunk.len() as f64;
        }
        let val_eval = val.map(|v| evaluate(model, v, cfg.ece_bins)).transpose()?;
        let needs_acc = matches!(cfg.objective, Objective::Composite { adaptive: true, .. });
        let acc = match &val_eval {
            Some(e) => e.metrics.accuracy,
            None if needs_acc => accuracy(model, train)?,
            None => f64::NAN,
        };
        if let Objective::Composite { state, adaptive: true, .. } = &mut cfg.objective {
            state.update_weights(acc)?;
        }
        let rec = EpochRecord { epoch, loss: total / train.len() as f64, acc, omega, val: val_eval };
        on_epoch(&rec)?;
        records.push(rec);
    }
    Ok(records)
}
