//! Classification metrics: accuracy, macro precision/recall/F1, and
//! macro one-vs-rest AUC by the trapezoidal rule over an exact threshold
//! sweep (equivalent to the pairwise rule with ties counted 0.5).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    /// None for classes absent from the labels (excluded from macros).
    pub per_class: Vec<Option<ClassMetrics>>,
    pub warnings: Vec<String>,
}

/// `probs` is [N, C] with rows summing to 1; `labels` in [0, C).
pub fn compute_metrics(probs: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (n, c) = (probs.rows(), probs.cols());
    if n != labels.len() {
        return Err(Error::Dimension {
            op: "compute_metrics",
            lhs: vec![n, c],
            rhs: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::Data("no samples to score".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!("label {bad} outside [0, {c})")));
    }
    for i in 0..n {
        let s: f64 = (0..c).map(|j| probs.at2(i, j)).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("probability row {i} sums to {s}")));
        }
    }

    let pred: Vec<usize> = (0..n)
        .map(|i| {
            (0..c)
                .max_by(|&a, &b| probs.at2(i, a).partial_cmp(&probs.at2(i, b)).unwrap())
                .unwrap()
        })
        .collect();
    let accuracy =
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n as f64;

    let mut per_class = Vec::with_capacity(c);
    let mut warnings = Vec::new();
    for class in 0..c {
        let support = labels.iter().filter(|&&l| l == class).count();
        if support == 0 {
            warnings.push(format!("class {class} absent from labels; excluded from macro averages"));
            per_class.push(None);
            continue;
        }
        let tp = (0..n).filter(|&i| pred[i] == class && labels[i] == class).count() as f64;
        let fp = (0..n).filter(|&i| pred[i] == class && labels[i] != class).count() as f64;
        let fnn = support as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / (tp + fnn);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let scores: Vec<f64> = (0..n).map(|i| probs.at2(i, class)).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let (auc, roc) = roc_auc(&scores, &positives);
        per_class.push(Some(ClassMetrics {
            class,
            support,
            precision,
            recall,
            f1,
            auc,
            roc,
        }));
    }

    let present: Vec<&ClassMetrics> = per_class.iter().flatten().collect();
    let k = present.len() as f64;
    Ok(MetricsReport {
        samples: n,
        accuracy,
        macro_precision: present.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: present.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: present.iter().map(|m| m.f1).sum::<f64>() / k,
        macro_auc: present.iter().map(|m| m.auc).sum::<f64>() / k,
        per_class,
        warnings,
    })
}

/// Exact threshold sweep: one ROC step per distinct score, trapezoid area.
/// A class with no negatives gets AUC 1.0 (vacuous ranking).
fn roc_auc(scores: &[f64], positive: &[bool]) -> (f64, Vec<RocPoint>) {
    let p = positive.iter().filter(|&&x| x).count() as f64;
    let ng = positive.len() as f64 - p;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group at this threshold
        let (mut dtp, mut dfp) = (0.0, 0.0);
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                dtp += 1.0;
            } else {
                dfp += 1.0;
            }
            i += 1;
        }
        let (prev_fpr, prev_tpr) = (
            if ng > 0.0 { fp / ng } else { 0.0 },
            if p > 0.0 { tp / p } else { 0.0 },
        );
        tp += dtp;
        fp += dfp;
        let (fpr, tpr) = (
            if ng > 0.0 { fp / ng } else { 0.0 },
            if p > 0.0 { tp / p } else { 0.0 },
        );
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        roc.push(RocPoint { threshold, fpr, tpr });
    }
    if ng == 0.0 {
        auc = 1.0;
    }
    (auc, roc)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(vals: &[f64]) -> Summary {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub accuracy: Summary,
    pub macro_precision: Summary,
    pub macro_recall: Summary,
    pub macro_f1: Summary,
    pub macro_auc: Summary,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Data("no fold reports to aggregate".into()));
    }
    let pick = |f: fn(&MetricsReport) -> f64| {
        summarize(&reports.iter().map(f).collect::<Vec<_>>())
    };
    Ok(AggregateReport {
        folds: reports.len(),
        accuracy: pick(|r| r.accuracy),
        macro_precision: pick(|r| r.macro_precision),
        macro_recall: pick(|r| r.macro_recall),
        macro_f1: pick(|r| r.macro_f1),
        macro_auc: pick(|r| r.macro_auc),
    })
}

/// O(n^2) pairwise AUC with ties counted 0.5; the test oracle for the
/// threshold-sweep implementation.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !positive[i] {
            continue;
        }
        for j in 0..scores.len() {
            if positive[j] {
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
    if pairs == 0.0 {
        1.0
    } else {
        wins / pairs
    }
}
