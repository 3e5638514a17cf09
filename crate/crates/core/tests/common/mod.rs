//! Oracles and fixtures shared by the integration tests and the acceptance
//! gate. Each test binary uses a different subset.
#![allow(dead_code)]

use usad_core::metrics::{ClassMetrics, ConfusionMatrix};

/// Metrics recomputed from the per-sample `(truth, pred)` list a confusion
/// matrix stands for, one sample at a time.
#[derive(Debug)]
pub struct OracleMetrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub g_mean: f64,
}

pub fn expand(rows: &[Vec<u64>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, row) in rows.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            out.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    out
}

pub fn oracle_metrics(n: usize, samples: &[(usize, usize)]) -> OracleMetrics {
    let total = samples.len() as f64;
    let hits = samples.iter().filter(|(t, p)| t == p).count() as f64;
    let mut precision = vec![0.0; n];
    let mut recall = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    let mut support = vec![0.0; n];
    for c in 0..n {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for &(t, p) in samples {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        support[c] = tp + fn_;
        precision[c] = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        recall[c] = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let (p, r) = (precision[c], recall[c]);
        f1[c] = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let present: Vec<f64> = (0..n).filter(|&c| support[c] > 0.0).map(|c| recall[c]).collect();
    let g_mean = present.iter().product::<f64>().powf(1.0 / present.len() as f64);
    OracleMetrics {
        accuracy: hits / total,
        f1_macro: f1.iter().sum::<f64>() / n as f64,
        f1_weighted: (0..n).map(|c| f1[c] * support[c]).sum::<f64>() / total,
        g_mean,
        precision,
        recall,
        f1,
    }
}

/// Largest absolute difference between the library metrics and the oracle.
pub fn metric_gap(m: &ClassMetrics, o: &OracleMetrics) -> f64 {
    let mut gap: f64 = 0.0;
    let mut see = |a: f64, b: f64| gap = gap.max((a - b).abs());
    see(m.accuracy, o.accuracy);
    see(m.f1_macro, o.f1_macro);
    see(m.f1_weighted, o.f1_weighted);
    see(m.g_mean, o.g_mean);
    let n = o.precision.len() as f64;
    see(m.precision_macro, o.precision.iter().sum::<f64>() / n);
    see(m.recall_macro, o.recall.iter().sum::<f64>() / n);
    for c in 0..o.precision.len() {
        see(m.precision[c], o.precision[c]);
        see(m.recall[c], o.recall[c]);
        see(m.f1[c], o.f1[c]);
    }
    gap
}

/// Calls `f` on every nonzero `n × n` matrix with cells in `0..=max`.
/// Returns how many matrices were visited.
pub fn for_each_matrix(n: usize, max: u64, mut f: impl FnMut(&[Vec<u64>])) -> u64 {
    let cells = n * n;
    let mut digits = vec![0u64; cells];
    let mut rows = vec![vec![0u64; n]; n];
    let mut visited = 0;
    loop {
        let mut i = 0;
        while i < cells && digits[i] == max {
            digits[i] = 0;
            rows[i / n][i % n] = 0;
            i += 1;
        }
        if i == cells {
            return visited;
        }
        digits[i] += 1;
        rows[i / n][i % n] = digits[i];
        visited += 1;
        f(&rows);
    }
}

/// Worst oracle gap over a set of matrices.
pub fn check_matrix(rows: &[Vec<u64>]) -> f64 {
    let cm = ConfusionMatrix::from_rows(rows).unwrap();
    let m = usad_core::metrics::class_metrics(&cm).unwrap();
    let o = oracle_metrics(rows.len(), &expand(rows));
    metric_gap(&m, &o)
}

/// Mann-Whitney U over all positive/negative pairs, ties counting half.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Two-bin miscalibration fixture with ECE exactly 0.25: half the samples
/// at confidence 0.95 with half of them right, half at 0.55 with half right.
pub fn ece_fixture() -> (Vec<Vec<f64>>, Vec<usize>) {
    let probs = vec![vec![0.95, 0.05], vec![0.95, 0.05], vec![0.55, 0.45], vec![0.55, 0.45]];
    (probs, vec![0, 1, 0, 1])
}

/// Worst finite-difference error over every parameter of a small split-
/// attention network (K=2, R=2, 8 channels, L=16), for one seed.
pub fn usad_gradcheck(seed: u64, order: usad_core::net::AttentionOrder) -> f64 {
    use rand::{Rng, SeedableRng};
    use usad_autodiff::gradcheck::check_params;
    use usad_core::net::{assemble_input, UsadConfig, UsadNet};

    let cfg = UsadConfig { channels: 8, head_hidden: 16, order, ..UsadConfig::new(1, 16, 3) };
    let net = UsadNet::new(cfg, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let f = usad_core::stats::condition_features(&x, 1, usad_core::stats::DEFAULT_EPS).unwrap();
    let input = assemble_input::<f64>(&x, &f, 1, 16).unwrap();
    let y = (seed % 3) as usize;
    let report = check_params(&net.store, None, 1e-5, |g, s| {
        let v = g.input(input.clone());
        let logits = net
            .logits(g, s, v, None)
            .map_err(|e| usad_autodiff::Error::Invalid { op: "usad", msg: e.to_string() })?;
        let lp = g.log_softmax(logits, 0)?;
        let pick = g.select(lp, y)?;
        g.neg(pick)
    })
    .unwrap();
    assert_eq!(report.checked, net.store.num_scalars());
    report.max_rel_err
}

/// A full three-stage run small enough for a test: 2 classes of 12
/// windows of length 16, a 5-step denoiser and an 8-channel classifier.
pub fn tiny_run_config(seed: u64) -> usad_core::config::RunConfig {
    let mut cfg = usad_core::config::RunConfig::default();
    cfg.apply_text(&format!(
        "seed={seed}
toy.classes=2
toy.len=16
toy.per_class=12
diffusion.T=5
diffusion.hidden=8
diffusion.blocks=1
diffusion.groups=2
diffusion.epochs=2
diffusion.batch_size=8
model.kernels=3
model.channels=8
model.attn_hidden=4
model.head_hidden=8
model.dropout=0
pretrain.epochs=2
pretrain.batch_size=8
finetune.epochs=8
finetune.lr=5e-3
finetune.batch_size=8
"
    ))
    .unwrap();
    cfg
}

/// Per-layer count written out from the layer shapes, independently of
/// the `ConvSpec` arithmetic.
pub fn usad_closed_form(cfg: &usad_core::net::UsadConfig) -> usize {
    let (c, k, r, d) = (cfg.channels, cfg.cardinality, cfg.radix, cfg.attn_hidden);
    let g = k * r;
    let stem = c * 5 * cfg.in_channels * 3 + c;
    let branch = |kernel: usize| {
        let split = r * c * (c / g) * kernel + r * c;
        let spatial = if cfg.spatial_attn { 2 * 7 + 1 } else { 0 };
        let tw = if cfg.order == usad_core::net::AttentionOrder::SpatialFirst { c } else { r * c };
        let temporal = if cfg.temporal_attn { k * d * (tw / k) + k * d + tw * d + tw } else { 0 };
        let radix = k * d * (c / k) + k * d + r * (c * d + c);
        let fusion = c * (c / g) * 3 + c;
        split + spatial + temporal + radix + fusion
    };
    let width = cfg.kernels.len() * c;
    stem + cfg.kernels.iter().map(|&kk| branch(kk)).sum::<usize>()
        + width * cfg.head_hidden
        + cfg.head_hidden
        + cfg.head_hidden * cfg.n_classes
        + cfg.n_classes
}
