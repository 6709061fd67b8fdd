//! Evaluation metrics: NLL, accuracy, binned calibration error, ensemble
//! disagreement, and corruption-grid aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{nll, LikelihoodMode};
use crate::tensor::Tensor;

pub const DEFAULT_ECE_BINS: usize = 15;

/// Member predictive distributions `[M, B, C]`, stored as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    log_probs: Tensor,
    labels: Vec<usize>,
}

fn check_rows(log_probs: &Tensor, labels: &[usize]) -> Result<()> {
    let s = log_probs.shape();
    if s.len() != 3 || s[1] != labels.len() || s[0] == 0 || s[2] < 2 {
        return Err(Error::Shape {
            op: "prediction_set",
            lhs: s.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= s[2]) {
        return Err(Error::Label { label, classes: s[2] });
    }
    for row in log_probs.data().chunks(s[2]) {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "member probabilities sum to {total}, not 1"
            )));
        }
    }
    Ok(())
}

impl PredictionSet {
    pub fn from_log_probs(log_probs: Tensor, labels: Vec<usize>) -> Result<Self> {
        check_rows(&log_probs, &labels)?;
        Ok(Self { log_probs, labels })
    }

    pub fn from_probs(probs: &Tensor, labels: Vec<usize>) -> Result<Self> {
        Self::from_log_probs(probs.map(f64::ln), labels)
    }

    pub fn members(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.log_probs.shape()[2]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    /// Equal-weight mixture of member probabilities, `[B, C]`.
    pub fn mixture_probs(&self) -> Tensor {
        let (m, b, c) = (self.members(), self.len(), self.classes());
        let mut out = vec![0.0; b * c];
        for k in 0..m {
            for (o, v) in out.iter_mut().zip(&self.log_probs.data()[k * b * c..(k + 1) * b * c]) {
                *o += v.exp();
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Tensor::new(vec![b, c], out).expect("b x c")
    }

    /// Arg-max class of each member on each example.
    pub fn member_predictions(&self) -> Vec<Vec<usize>> {
        let (b, c) = (self.len(), self.classes());
        self.log_probs
            .data()
            .chunks(b * c)
            .map(|member| member.chunks(c).map(argmax).collect())
            .collect()
    }

    pub fn nll(&self, mode: LikelihoodMode) -> Result<f64> {
        nll(mode, &self.log_probs, &self.labels)
    }

    /// Mixture NLL, accuracy and calibration of the mixture prediction;
    /// diversity when there are at least two members and accuracy < 1.
    pub fn report(&self, num_bins: usize) -> Result<MetricsReport> {
        let probs = self.mixture_probs();
        let acc = accuracy(&probs, &self.labels)?;
        let diversity = if self.members() >= 2 && acc < 1.0 {
            Some(diversity(&self.member_predictions(), acc)?)
        } else {
            None
        };
        Ok(MetricsReport {
            nll: self.nll(LikelihoodMode::MixtureNll)?,
            accuracy: acc,
            ece: ece(&probs, &self.labels, num_bins)?,
            diversity,
            ..MetricsReport::default()
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_probs(probs: &Tensor, labels: &[usize]) -> Result<usize> {
    if probs.ndim() != 2 || probs.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let c = probs.shape()[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    Ok(c)
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = check_probs(probs, labels)?;
    let hits = probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Expected calibration error over equal-width max-probability bins.
pub fn ece(probs: &Tensor, labels: &[usize], num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let c = check_probs(probs, labels)?;
    let mut count = vec![0usize; num_bins];
    let mut conf = vec![0.0; num_bins];
    let mut hits = vec![0.0; num_bins];
    for (row, &y) in probs.data().chunks(c).zip(labels) {
        let j = argmax(row);
        let p = row[j];
        let bin = ((p * num_bins as f64) as usize).min(num_bins - 1);
        count[bin] += 1;
        conf[bin] += p;
        hits[bin] += f64::from(u8::from(j == y));
    }
    let n = labels.len() as f64;
    Ok((0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

/// Mean pairwise disagreement of member predictions, normalized by `1 − accuracy`.
pub fn diversity(predictions: &[Vec<usize>], accuracy: f64) -> Result<f64> {
    let m = predictions.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 members, got {m}")));
    }
    let b = predictions[0].len();
    if b == 0 || predictions.iter().any(|p| p.len() != b) {
        return Err(Error::Shape {
            op: "diversity",
            lhs: predictions.iter().map(Vec::len).collect(),
            rhs: vec![b],
        });
    }
    if !(0.0..1.0).contains(&accuracy) {
        return Err(Error::InvalidArgument(format!(
            "diversity is undefined at accuracy {accuracy}; it needs 0 <= accuracy < 1"
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            let differ = predictions[i].iter().zip(&predictions[j]).filter(|(a, b)| a != b).count();
            total += differ as f64 / b as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64 / (1.0 - accuracy))
}

/// One evaluation record; serializes to a single JSON line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll: f64,
    pub accuracy: f64,
    pub ece: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
}

impl MetricsReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Unweighted means over a corruption grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSummary {
    pub c_nll: f64,
    pub c_accuracy: f64,
    pub c_ece: f64,
}

/// Averages every `(type, intensity)` cell; the cells must form the full
/// product of the types and intensities (1–5) that appear.
pub fn corruption_aggregate(cells: &BTreeMap<(String, u8), MetricsReport>) -> Result<CorruptionSummary> {
    if cells.is_empty() {
        return Err(Error::InvalidArgument("empty corruption grid".into()));
    }
    let types: BTreeSet<&String> = cells.keys().map(|(t, _)| t).collect();
    let levels: BTreeSet<u8> = cells.keys().map(|&(_, i)| i).collect();
    let mut missing: Vec<String> = levels
        .iter()
        .filter(|i| !(1..=5).contains(*i))
        .map(|i| format!("intensity {i} out of range"))
        .collect();
    for t in &types {
        for &i in &levels {
            if !cells.contains_key(&((*t).clone(), i)) {
                missing.push(format!("{t}@{i}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "incomplete corruption grid: {}",
            missing.join(", ")
        )));
    }
    let n = cells.len() as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for r in cells.values() {
        a += r.nll;
        b += r.accuracy;
        c += r.ece;
    }
    Ok(CorruptionSummary {
        c_nll: a / n,
        c_accuracy: b / n,
        c_ece: c / n,
    })
}
