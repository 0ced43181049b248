//! Accuracy and group-fairness metrics.
//!
//! The favorable outcome is `ŷ = +1`. `Δ_EO` is the sum of the TPR and FPR
//! gaps, not their maximum.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::model::NeuralNet;

/// `+1` when the positive logit is strictly larger; ties go to `−1`.
pub fn predict_from_logits(logits: &Matrix) -> Vec<i8> {
    (0..logits.rows())
        .map(|i| if logits[(i, 1)] > logits[(i, 0)] { 1 } else { -1 })
        .collect()
}

pub fn predict(net: &NeuralNet, ds: &Dataset) -> Result<Vec<i8>> {
    Ok(predict_from_logits(&net.logits(&ds.x)?))
}

/// Confusion counts of one group, positive class `+1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }

    pub fn predicted_positive(&self) -> usize {
        self.tp + self.fp
    }
}

/// Per-(s, y, ŷ) counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub group1: Confusion,
    pub group2: Confusion,
}

impl GroupCounts {
    pub fn tally(preds: &[i8], ds: &Dataset) -> Result<Self> {
        if preds.len() != ds.len() {
            return Err(Error::shape(
                "GroupCounts::tally",
                format!("{} predictions for {} rows", preds.len(), ds.len()),
            ));
        }
        let mut counts = GroupCounts::default();
        for ((&p, &y), &s) in preds.iter().zip(&ds.y).zip(&ds.s) {
            let c = if s == 1 {
                &mut counts.group1
            } else {
                &mut counts.group2
            };
            match (y > 0, p > 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(counts)
    }

    fn group(&self, g: u8) -> &Confusion {
        if g == 1 {
            &self.group1
        } else {
            &self.group2
        }
    }

    fn positive_rate(&self, g: u8) -> Result<f64> {
        let c = self.group(g);
        if c.total() == 0 {
            return Err(Error::GroupEmpty {
                group: g,
                context: " in evaluation data".into(),
            });
        }
        Ok(c.predicted_positive() as f64 / c.total() as f64)
    }

    fn tpr(&self, g: u8) -> Result<f64> {
        let c = self.group(g);
        if c.positives() == 0 {
            return Err(Error::DegenerateCell { group: g, label: 1 });
        }
        Ok(c.tp as f64 / c.positives() as f64)
    }

    fn fpr(&self, g: u8) -> Result<f64> {
        let c = self.group(g);
        if c.negatives() == 0 {
            return Err(Error::DegenerateCell { group: g, label: -1 });
        }
        Ok(c.fp as f64 / c.negatives() as f64)
    }

    pub fn delta_dp(&self) -> Result<f64> {
        Ok((self.positive_rate(1)? - self.positive_rate(2)?).abs())
    }

    /// `(Δ_TPR, Δ_FPR, Δ_EO)`.
    pub fn delta_eo(&self) -> Result<(f64, f64, f64)> {
        let tpr = (self.tpr(1)? - self.tpr(2)?).abs();
        let fpr = (self.fpr(1)? - self.fpr(2)?).abs();
        Ok((tpr, fpr, tpr + fpr))
    }

    /// Support-weighted mean of the per-class F1 scores. A class whose F1 is
    /// undefined (no true and no predicted members) scores 0.
    pub fn weighted_f1(&self) -> f64 {
        let tp = self.group1.tp + self.group2.tp;
        let fp = self.group1.fp + self.group2.fp;
        let tn = self.group1.tn + self.group2.tn;
        let fn_ = self.group1.fn_ + self.group2.fn_;
        let total = (tp + fp + tn + fn_) as f64;
        if total == 0.0 {
            return 0.0;
        }
        // positive class: hits tp, false alarms fp, misses fn
        // negative class: hits tn, false alarms fn, misses fp
        let f1 = |hit: usize, alarm: usize, miss: usize| {
            let denom = 2 * hit + alarm + miss;
            if denom == 0 {
                0.0
            } else {
                2.0 * hit as f64 / denom as f64
            }
        };
        let pos_support = (tp + fn_) as f64;
        let neg_support = (tn + fp) as f64;
        (pos_support * f1(tp, fp, fn_) + neg_support * f1(tn, fn_, fp)) / total
    }
}

pub fn demographic_parity_gap(preds: &[i8], ds: &Dataset) -> Result<f64> {
    GroupCounts::tally(preds, ds)?.delta_dp()
}

/// `(Δ_TPR, Δ_FPR, Δ_EO)`.
pub fn equalized_odds_gap(preds: &[i8], ds: &Dataset) -> Result<(f64, f64, f64)> {
    GroupCounts::tally(preds, ds)?.delta_eo()
}

/// `(weighted F1, 100 · (1 − weighted F1))`.
pub fn weighted_f1_err(preds: &[i8], ds: &Dataset) -> Result<(f64, f64)> {
    let f1 = GroupCounts::tally(preds, ds)?.weighted_f1();
    Ok((f1, 100.0 * (1.0 - f1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub err_percent: f64,
    pub delta_dp: f64,
    pub delta_tpr: f64,
    pub delta_fpr: f64,
    pub delta_eo: f64,
    pub group_counts: GroupCounts,
}

impl FairnessReport {
    pub fn from_predictions(preds: &[i8], ds: &Dataset) -> Result<Self> {
        let counts = GroupCounts::tally(preds, ds)?;
        let (delta_tpr, delta_fpr, delta_eo) = counts.delta_eo()?;
        Ok(FairnessReport {
            err_percent: 100.0 * (1.0 - counts.weighted_f1()),
            delta_dp: counts.delta_dp()?,
            delta_tpr,
            delta_fpr,
            delta_eo,
            group_counts: counts,
        })
    }

    pub fn evaluate(net: &NeuralNet, ds: &Dataset) -> Result<Self> {
        FairnessReport::from_predictions(&predict(net, ds)?, ds)
    }

    /// Bias under `constraint`'s matching metric.
    pub fn bias(&self, constraint: crate::model::Constraint) -> f64 {
        match constraint {
            crate::model::Constraint::Dp => self.delta_dp,
            crate::model::Constraint::Eo => self.delta_eo,
        }
    }
}

/// Projection of mean-centered rows onto the leading principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub scores: Matrix,
    /// Sample variance (`N − 1` denominator) along each kept axis.
    pub explained_variance: Vec<f64>,
}

pub fn pca_project(representations: &Matrix, dims: usize) -> Result<PcaProjection> {
    let (n, width) = (representations.rows(), representations.cols());
    if dims == 0 || dims > width {
        return Err(Error::Input(format!(
            "PCA to {dims} dimensions from width {width}"
        )));
    }
    if n < 2 {
        return Err(Error::Input("PCA needs at least two rows".into()));
    }
    let mut mean = vec![0.0; width];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(representations.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = Matrix::from_fn(n, width, |i, j| representations[(i, j)] - mean[j]);
    let dec = svd(&centered)?;
    let scores = Matrix::from_fn(n, dims, |i, t| dec.u[(i, t)] * dec.s[t]);
    let explained_variance = dec.s[..dims]
        .iter()
        .map(|s| s * s / (n - 1) as f64)
        .collect();
    Ok(PcaProjection {
        scores,
        explained_variance,
    })
}
