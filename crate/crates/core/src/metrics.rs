//! Confusion-matrix metrics, ROC AUC, calibration error and embedding
//! separability.

use crate::error::{invalid, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, counts: vec![0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return invalid("confusion matrix must be square");
        }
        Ok(Self { n, counts: rows.concat() })
    }

    pub fn from_predictions(n: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return invalid(format!("{} labels vs {} predictions", truth.len(), pred.len()));
        }
        let mut cm = Self::new(n);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n || p >= n {
                return invalid(format!("label {t} or prediction {p} outside {n} classes"));
            }
            cm.counts[t * n + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.n).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }
}

/// Summary of a confusion matrix. `undefined` lists per-class precision or
/// recall values whose denominator was zero and were reported as 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub g_mean: f64,
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    let total = cm.total();
    if cm.n == 0 || total == 0 {
        return invalid("metrics of an empty confusion matrix");
    }
    let n = cm.n;
    let mut undefined = Vec::new();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    for i in 0..n {
        let tp = cm.get(i, i);
        precision.push(ratio(tp, cm.col_sum(i)).unwrap_or_else(|| {
            undefined.push(format!("precision[{i}]"));
            0.0
        }));
        recall.push(ratio(tp, cm.row_sum(i)).unwrap_or_else(|| {
            undefined.push(format!("recall[{i}]"));
            0.0
        }));
    }
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(p, r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let f1_weighted = (0..n).map(|i| f1[i] * cm.row_sum(i) as f64).sum::<f64>() / total as f64;
    let accuracy = (0..n).map(|i| cm.get(i, i)).sum::<u64>() as f64 / total as f64;
    Ok(ClassMetrics {
        accuracy,
        precision_macro: mean(&precision),
        recall_macro: mean(&recall),
        f1_macro: mean(&f1),
        f1_weighted,
        g_mean: g_mean_of(cm, &recall),
        precision,
        recall,
        f1,
        undefined,
    })
}

/// Geometric mean of per-class recalls over classes present in the data.
/// For two classes this is sqrt(TPR·TNR).
pub fn g_mean(cm: &ConfusionMatrix) -> f64 {
    let recall: Vec<f64> = (0..cm.n).map(|i| ratio(cm.get(i, i), cm.row_sum(i)).unwrap_or(0.0)).collect();
    g_mean_of(cm, &recall)
}

fn g_mean_of(cm: &ConfusionMatrix, recall: &[f64]) -> f64 {
    let present: Vec<f64> = (0..cm.n).filter(|&i| cm.row_sum(i) > 0).map(|i| recall[i]).collect();
    if present.is_empty() || present.contains(&0.0) {
        return 0.0;
    }
    (present.iter().map(|r| r.ln()).sum::<f64>() / present.len() as f64).exp()
}

/// Area under the ROC curve for binary `labels` (true = positive) by
/// trapezoidal integration over every distinct score threshold. Returns
/// `None` unless both classes are present.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        area += (tpr + prev_tpr) / 2.0 * (fpr - prev_fpr);
        (prev_tpr, prev_fpr) = (tpr, fpr);
    }
    Some(area)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes skipped because they had no positive or no negative samples.
    pub skipped: Vec<usize>,
}

/// Macro one-vs-rest AUC over probability rows.
pub fn auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<AucReport> {
    let Some(k) = probs.first().map(Vec::len) else {
        return invalid("AUC of an empty prediction set");
    };
    if probs.len() != labels.len() {
        return invalid(format!("{} probability rows vs {} labels", probs.len(), labels.len()));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for c in 0..k {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let a = binary_auc(&scores, &truth);
        if a.is_none() {
            skipped.push(c);
        }
        per_class.push(a);
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return invalid("AUC undefined: no class has both positives and negatives");
    }
    let macro_auc = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(AucReport { macro_auc, per_class, skipped })
}

/// Expected calibration error over equal-width bins of the top probability.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return invalid("ECE needs at least one bin");
    }
    if probs.is_empty() || probs.len() != labels.len() {
        return invalid(format!("{} probability rows vs {} labels", probs.len(), labels.len()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0.0; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let (pred, top) = argmax(p);
        let b = ((top * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += top;
        if pred == y {
            correct[b] += 1.0;
        }
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (correct[b] - conf[b]).abs() / n)
        .sum())
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separability {
    pub intra: f64,
    pub inter: f64,
    /// `inter / intra`; infinite when every class collapses to a point.
    pub ratio: f64,
}

impl Separability {
    pub fn ratio_is_infinite(&self) -> bool {
        self.ratio.is_infinite()
    }
}

pub fn feature_separability(embeddings: &[(Vec<f64>, usize)]) -> Result<Separability> {
    let mut labels: Vec<usize> = embeddings.iter().map(|e| e.1).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return invalid("separability needs at least two classes");
    }
    let dim = embeddings[0].0.len();
    if embeddings.iter().any(|e| e.0.len() != dim) {
        return invalid("embeddings have mixed dimensions");
    }
    let centroids: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            let members: Vec<&Vec<f64>> = embeddings.iter().filter(|e| e.1 == y).map(|e| &e.0).collect();
            (0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect()
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let intra = embeddings
        .iter()
        .map(|(v, y)| dist(v, &centroids[labels.binary_search(y).unwrap()]))
        .sum::<f64>()
        / embeddings.len() as f64;
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            pair_sum += dist(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    let inter = pair_sum / pairs as f64;
    let ratio = if intra == 0.0 { f64::INFINITY } else { inter / intra };
    Ok(Separability { intra, inter, ratio })
}

/// Headline evaluation numbers for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    pub auc: Option<f64>,
    pub ece: f64,
}

impl Evaluation {
    pub fn from_probs(probs: &[Vec<f64>], labels: &[usize], n_classes: usize, bins: usize) -> Result<Self> {
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p).0).collect();
        let confusion = ConfusionMatrix::from_predictions(n_classes, labels, &pred)?;
        let metrics = class_metrics(&confusion)?;
        let auc = auc(probs, labels).ok().map(|r| r.macro_auc);
        let ece = ece(probs, labels, bins)?;
        Ok(Self { confusion, metrics, auc, ece })
    }

    pub const CSV_COLUMNS: [&'static str; 7] = ["acc", "pre", "rec", "f1", "g_mean", "auc", "ece"];

    pub fn csv_values(&self) -> [f64; 7] {
        let m = &self.metrics;
        [m.accuracy, m.precision_macro, m.recall_macro, m.f1_macro, m.g_mean, self.auc.unwrap_or(f64::NAN), self.ece]
    }
}
