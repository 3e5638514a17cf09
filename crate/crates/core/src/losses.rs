//! Cross-entropy, focal, label-smoothing and class-balanced losses, plus the
//! accuracy-driven controller that reweights the composite loss each epoch.

use usad_autodiff::{Graph, Var};

use crate::error::{invalid, Result};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 1.0, alpha: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassBalancedParams {
    pub beta: f64,
}

impl Default for ClassBalancedParams {
    fn default() -> Self {
        Self { beta: 0.9 }
    }
}

/// True when `p[y]` had to be clamped to [`PROB_FLOOR`].
pub fn is_floored(p: &[f64], y: usize) -> bool {
    p[y] < PROB_FLOOR
}

pub fn cross_entropy(p: &[f64], y: usize) -> f64 {
    -p[y].max(PROB_FLOOR).ln()
}

pub fn focal_loss(p_t: f64, params: FocalParams) -> f64 {
    let p = p_t.max(PROB_FLOOR);
    -params.alpha * (1.0 - p).powf(params.gamma) * p.ln()
}

pub fn label_smoothing_nll(logp: &[f64], y: usize, epsilon: f64) -> f64 {
    let k = logp.len() as f64;
    -logp
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            let target = if i == y { 1.0 - epsilon + epsilon / k } else { epsilon / k };
            lp * target
        })
        .sum::<f64>()
}

/// Per-sample scales `(1 - beta) / (1 - beta^n_y)`, normalised so the
/// batch mean is 1.
pub fn class_balanced_scales(labels: &[usize], counts: &[usize], params: ClassBalancedParams) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&params.beta) {
        return invalid(format!("class-balanced beta must lie in [0, 1), got {}", params.beta));
    }
    let mut raw = Vec::with_capacity(labels.len());
    for &y in labels {
        let n = match counts.get(y) {
            Some(&n) if n > 0 => n,
            _ => return invalid(format!("no class count for label {y}")),
        };
        raw.push((1.0 - params.beta) / (1.0 - params.beta.powi(n as i32)));
    }
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    Ok(raw.into_iter().map(|s| s / mean).collect())
}

/// Mean of the class-balanced scaled per-sample losses.
pub fn class_balanced_reweight(
    losses: &[f64],
    labels: &[usize],
    counts: &[usize],
    params: ClassBalancedParams,
) -> Result<f64> {
    if losses.len() != labels.len() || losses.is_empty() {
        return invalid(format!("{} losses for {} labels", losses.len(), labels.len()));
    }
    let scales = class_balanced_scales(labels, counts, params)?;
    Ok(losses.iter().zip(&scales).map(|(l, s)| l * s).sum::<f64>() / losses.len() as f64)
}

/// Static part of the composite loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub smoothing: f64,
    pub focal: FocalParams,
    pub class_balanced: ClassBalancedParams,
    /// Weight of the optional class-balanced cross-entropy term (0 = off).
    pub cb_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.05,
            focal: FocalParams::default(),
            class_balanced: ClassBalancedParams::default(),
            cb_weight: 0.0,
        }
    }
}

/// The three sub-losses of one sample, evaluated on the tape from logits.
pub struct SubLosses {
    pub smoothing: Var,
    pub focal: Var,
    pub ce: Var,
}

pub fn sub_losses(g: &mut Graph<'_>, logits: Var, y: usize, cfg: &LossConfig) -> Result<SubLosses> {
    let k = g.value(logits).numel();
    let logp = g.log_softmax(logits, 0)?;
    let lp_y = g.select(logp, y)?;
    let ce = g.neg(lp_y)?;

    let target: Vec<f64> = (0..k)
        .map(|i| if i == y { 1.0 - cfg.smoothing + cfg.smoothing / k as f64 } else { cfg.smoothing / k as f64 })
        .collect();
    let weighted = g.mul_mask(logp, target)?;
    let total = g.sum(weighted)?;
    let smoothing = g.neg(total)?;

    let p = g.exp(lp_y)?;
    let focal = if cfg.focal.gamma == 0.0 {
        g.scale(ce, cfg.focal.alpha)?
    } else {
        let neg_p = g.neg(p)?;
        let one_minus = g.add_scalar(neg_p, 1.0)?;
        let modulator = g.powf(one_minus, cfg.focal.gamma)?;
        let raw = g.mul(modulator, ce)?;
        g.scale(raw, cfg.focal.alpha)?
    };
    Ok(SubLosses { smoothing, focal, ce })
}

/// `w0·smoothing + w1·focal + w2·ce`, plus `cb_weight·cb_scale·ce` when the
/// class-balanced term is enabled.
pub fn composite_loss(
    g: &mut Graph<'_>,
    logits: Var,
    y: usize,
    omega: [f64; 3],
    cfg: &LossConfig,
    cb_scale: f64,
) -> Result<Var> {
    let parts = sub_losses(g, logits, y, cfg)?;
    let mut terms = Vec::with_capacity(4);
    for (w, v) in omega.iter().zip([parts.smoothing, parts.focal, parts.ce]) {
        if *w != 0.0 {
            terms.push(g.scale(v, *w)?);
        }
    }
    if cfg.cb_weight != 0.0 {
        terms.push(g.scale(parts.ce, cfg.cb_weight * cb_scale)?);
    }
    if terms.is_empty() {
        return g.scale(parts.ce, 0.0).map_err(Into::into);
    }
    if terms.len() == 1 {
        return Ok(terms[0]);
    }
    Ok(g.add_all(&terms)?)
}

/// Plain-value composite loss from a probability vector.
pub fn composite_value(p: &[f64], y: usize, omega: [f64; 3], cfg: &LossConfig) -> f64 {
    let logp: Vec<f64> = p.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
    omega[0] * label_smoothing_nll(&logp, y, cfg.smoothing)
        + omega[1] * focal_loss(p[y], cfg.focal)
        + omega[2] * cross_entropy(p, y)
}

/// Weights of the composite loss and the controller that adapts them.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeLossState {
    /// (smoothing, focal, cross-entropy) weights.
    pub omega: [f64; 3],
    pub tau: f64,
    pub prev_acc: Option<f64>,
    pub temperature: f64,
    pub bounds: (f64, f64),
}

impl Default for CompositeLossState {
    fn default() -> Self {
        Self {
            omega: [0.33, 0.33, 0.34],
            tau: 0.5,
            prev_acc: None,
            temperature: 1.0,
            bounds: (0.1, 0.8),
        }
    }
}

/// What one controller step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightUpdate {
    /// Closed-form focal weight before smoothing and clamping.
    pub target: f64,
    /// Focal weight after temperature smoothing, before clamping.
    pub pre_clamp: f64,
    /// Whether the step moved the largest weight in the direction the
    /// accuracy-feedback heuristic suggests (None on the first epoch or when
    /// accuracy is unchanged).
    pub heuristic_agrees: Option<bool>,
}

impl CompositeLossState {
    pub fn new(omega: [f64; 3], tau: f64, temperature: f64, bounds: (f64, f64)) -> Result<Self> {
        let s = Self { omega, tau, prev_acc: None, temperature, bounds };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bounds;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) || 3.0 * lo > 1.0 + 1e-12 || 3.0 * hi < 1.0 - 1e-12 {
            return invalid(format!("weight bounds [{lo}, {hi}] admit no weights summing to 1"));
        }
        if !(self.temperature > 0.0) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.omega.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid(format!("loss weights must be nonnegative, got {:?}", self.omega));
        }
        Ok(())
    }

    pub fn update_weights(&mut self, acc: f64) -> Result<WeightUpdate> {
        if !(0.0..=1.0).contains(&acc) {
            return invalid(format!("accuracy must lie in [0, 1], got {acc}"));
        }
        let (lo, hi) = self.bounds;
        let before = self.omega;
        let target = 2.0 - self.tau - 1.0 / (acc + 1e-8);
        let pre_clamp = before[1] + (target - before[1]) / self.temperature;
        let w1 = pre_clamp.clamp(lo, hi);
        let side = (0.5 * (1.0 - w1)).clamp(lo, hi);
        self.omega = project_capped_simplex([side, w1, side], lo, hi);

        let heuristic_agrees = self.prev_acc.and_then(|prev| {
            if acc == prev {
                return None;
            }
            let top = (0..3).max_by(|&a, &b| before[a].total_cmp(&before[b]).then(b.cmp(&a)))?;
            let delta = self.omega[top] - before[top];
            Some(if acc > prev { delta <= 0.0 } else { delta >= 0.0 })
        });
        self.prev_acc = Some(acc);
        Ok(WeightUpdate { target, pre_clamp, heuristic_agrees })
    }
}

/// Moves `w` onto {sum = 1, lo ≤ w_i ≤ hi} by spreading the residual over
/// coordinates that are not pinned at the relevant bound.
fn project_capped_simplex(mut w: [f64; 3], lo: f64, hi: f64) -> [f64; 3] {
    for _ in 0..8 {
        let residual = 1.0 - w.iter().sum::<f64>();
        if residual.abs() < 1e-15 {
            break;
        }
        let free: Vec<usize> = (0..3)
            .filter(|&i| if residual > 0.0 { w[i] < hi } else { w[i] > lo })
            .collect();
        if free.is_empty() {
            break;
        }
        let share = residual / free.len() as f64;
        for i in free {
            w[i] = (w[i] + share).clamp(lo, hi);
        }
    }
    w
}
