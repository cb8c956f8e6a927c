use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-6;

/// Positive prediction iff `P ≥ DECISION_THRESHOLD`.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Classification summary of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub subject_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub probabilities: Vec<f64>,
}

impl MetricsReport {
    /// Threshold probabilities at 0.5 and summarize. A class absent from
    /// `labels` is left out of the balanced accuracy; F1 is 0 when it has no
    /// denominator.
    pub fn from_predictions(
        subject_ids: Vec<String>,
        labels: Vec<u8>,
        probabilities: Vec<f64>,
    ) -> Result<Self> {
        if labels.len() != probabilities.len() || labels.len() != subject_ids.len() {
            return Err(Error::Invalid(format!(
                "{} subjects, {} labels and {} probabilities",
                subject_ids.len(),
                labels.len(),
                probabilities.len()
            )));
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&y, &p) in labels.iter().zip(&probabilities) {
            match (y == 1, p >= DECISION_THRESHOLD) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        Ok(MetricsReport {
            balanced_accuracy: balanced_accuracy(tp, fp, tn, fn_),
            f1: f1(tp, fp, fn_),
            tp,
            fp,
            tn,
            fn_,
            subject_ids,
            labels,
            probabilities,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Whether sample `i` is classified correctly.
    pub fn correct(&self, i: usize) -> bool {
        (self.probabilities[i] >= DECISION_THRESHOLD) == (self.labels[i] == 1)
    }
}

pub fn balanced_accuracy(tp: usize, fp: usize, tn: usize, fn_: usize) -> f64 {
    let mut rates = Vec::with_capacity(2);
    if tp + fn_ > 0 {
        rates.push(tp as f64 / (tp + fn_) as f64);
    }
    if tn + fp > 0 {
        rates.push(tn as f64 / (tn + fp) as f64);
    }
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// `[c_0, c_1]` with `c_y = total / (2 · count_y)`.
pub fn inverse_frequency_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Dataset(format!(
            "training split needs both classes for inverse-frequency weights ({neg} negative, {pos} positive)"
        )));
    }
    let total = labels.len() as f64;
    Ok([total / (2.0 * neg as f64), total / (2.0 * pos as f64)])
}

/// `−c_y·[y·ln p + (1−y)·ln(1−p)]` with `p` clamped first.
pub fn weighted_bce(p: f64, y: u8, class_weights: [f64; 2]) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let c = class_weights[y as usize];
    if y == 1 {
        -c * p.ln()
    } else {
        -c * (1.0 - p).ln()
    }
}

/// Mean weighted BCE over a batch: `p` is `[B]`.
pub fn weighted_bce_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    labels: &[u8],
    class_weights: [f64; 2],
) -> Result<Var> {
    let b = labels.len();
    if g.shape(p) != [b] {
        return Err(Error::Shape(format!(
            "probabilities {:?} for {} labels",
            g.shape(p),
            b
        )));
    }
    let pos: Vec<T> = labels
        .iter()
        .map(|&y| T::lit(if y == 1 { class_weights[1] } else { 0.0 }))
        .collect();
    let neg: Vec<T> = labels
        .iter()
        .map(|&y| T::lit(if y == 1 { 0.0 } else { class_weights[0] }))
        .collect();
    let pos = g.constant(Tensor::new(vec![b], pos)?)?;
    let neg = g.constant(Tensor::new(vec![b], neg)?)?;
    let pc = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP)?;
    let lp = g.ln(pc)?;
    let q = g.affine(pc, -1.0, 1.0)?;
    let lq = g.ln(q)?;
    let a = g.mul(lp, pos)?;
    let c = g.mul(lq, neg)?;
    let s = g.add(a, c)?;
    let total = g.sum(s)?;
    g.scale(total, -1.0 / b as f64)
}
