//! Classification and segmentation metrics, and the cross-domain harmonic mean.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[g][p]`: samples with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("class count must be at least 1".into()));
        }
        Ok(ConfusionMatrix { k, counts: vec![0; k * k] })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.k + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Predicted `c`, ground truth something else.
    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    /// Ground truth `c`, predicted something else.
    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.k, rhs.k, "confusion matrices with different class counts");
        self.counts.iter_mut().zip(&rhs.counts).for_each(|(a, b)| *a += b);
    }
}

/// Counts every position whose ground truth is not `ignore_label`.
pub fn confusion(pred: &[i64], gt: &[i64], k: usize, ignore_label: i64) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k)?;
    let in_range = |v: i64| v >= 0 && (v as u64) < k as u64;
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g == ignore_label {
            continue;
        }
        if !in_range(g) {
            return Err(Error::Domain(format!("ground-truth label {g} at index {i} is outside [0, {k})")));
        }
        if !in_range(p) {
            return Err(Error::Domain(format!("predicted label {p} at index {i} is outside [0, {k})")));
        }
        cm.add(g as usize, p as usize);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for classes absent from both predictions and ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// IoU per class in percent, and their mean over classes that occur.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouResult> {
    let per_class: Vec<Option<f64>> = (0..cm.classes())
        .map(|c| {
            let tp = cm.true_positives(c);
            let denom = tp + cm.false_positives(c) + cm.false_negatives(c);
            (denom > 0).then(|| 100.0 * tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("no class occurs in predictions or ground truth".into()));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouResult { miou, per_class })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    pub per_domain: Vec<(String, f64)>,
}

impl DomainScores {
    pub fn new(per_domain: Vec<(String, f64)>) -> Self {
        DomainScores { per_domain }
    }

    pub fn values(&self) -> Vec<f64> {
        self.per_domain.iter().map(|(_, v)| *v).collect()
    }

    pub fn harmonic_mean(&self) -> Result<f64> {
        harmonic_mean(&self.values())
    }
}

/// `M / Σ 1/m_j`; any zero score makes the result zero.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("harmonic mean of an empty list".into()));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!("scores must be finite and non-negative, got {v}")));
    }
    if values.contains(&0.0) {
        return Ok(0.0);
    }
    if let [a, b] = values {
        return Ok(2.0 * a * b / (a + b));
    }
    let inv: f64 = values.iter().map(|v| 1.0 / v).sum();
    Ok(values.len() as f64 / inv)
}

/// Percentage of positions where `pred == gt`.
pub fn accuracy(pred: &[i64], gt: &[i64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Domain("accuracy of an empty prediction set".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}
