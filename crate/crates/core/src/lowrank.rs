//! Importance-weighted truncated SVD of a dense head and the two low-rank
//! layers that replace it.
//!
//! For a head `z = h·W + b` with `W ∈ ℝ^{d×k}` and a positive row-importance
//! diagonal `D`, the rank-`r` factor pair minimizing `‖D·W − D·A·B‖_F` is
//! obtained from the SVD `D·W = U S Vᵀ`: `A = D⁻¹ U_r S_r`, `B = V_rᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, scale_rows, svd, truncate, DiagonalMatrix, Matrix, SvdResult};
use crate::model::{Activation, DenseLayer};

/// How many singular triplets to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankPolicy {
    /// Exactly this many.
    Fixed(usize),
    /// Smallest rank whose squared singular values retain at least this
    /// fraction of the total.
    Energy(f64),
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Energy(0.95)
    }
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::Fixed(0) => Err(Error::Config("rank must be at least 1".into())),
            RankPolicy::Energy(e) if !(e > 0.0 && e <= 1.0) => Err(Error::Config(format!(
                "energy threshold must lie in (0, 1], got {e}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn select(&self, singular_values: &[f64]) -> Result<usize> {
        let p = singular_values.len();
        match *self {
            RankPolicy::Fixed(r) => {
                if r == 0 || r > p {
                    Err(Error::Rank { rank: r, max: p })
                } else {
                    Ok(r)
                }
            }
            RankPolicy::Energy(threshold) => {
                self.validate()?;
                let energy = cumulative_energy(singular_values);
                // rounding slack so that a threshold of 1 selects full rank
                Ok(energy
                    .iter()
                    .position(|&e| e >= threshold - 1e-12)
                    .map_or(p, |i| i + 1))
            }
        }
    }
}

/// `E_r = Σ_{i≤r} sᵢ² / Σ sᵢ²` for every `r`; all ones for a zero spectrum.
pub fn cumulative_energy(singular_values: &[f64]) -> Vec<f64> {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    singular_values
        .iter()
        .map(|s| {
            acc += s * s;
            if total > 0.0 {
                acc / total
            } else {
                1.0
            }
        })
        .collect()
}

/// Factor pair replacing a dense `d × k` head.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankHead {
    /// `d × r`, weights of the first replacement layer.
    pub a: Matrix,
    /// `r × k`, weights of the second replacement layer.
    pub b_factor: Matrix,
    /// Carried over from the dense head.
    pub bias: Vec<f64>,
    pub rank: usize,
    /// Full spectrum of the weighted matrix `D·W`.
    pub weighted_singular_values: Vec<f64>,
}

impl LowRankHead {
    /// `a · b_factor`.
    pub fn product(&self) -> Matrix {
        matmul(&self.a, &self.b_factor).expect("factor shapes agree")
    }

    pub fn param_count(&self) -> usize {
        replacement_param_count(self.a.rows(), self.rank, self.b_factor.cols())
    }
}

/// Trainable parameters of the two replacement layers: `d·r + r·k + k`.
pub fn replacement_param_count(d: usize, r: usize, k: usize) -> usize {
    d * r + r * k + k
}

fn check_importance(w: &Matrix, imp: &DiagonalMatrix) -> Result<()> {
    if imp.dim() != w.rows() {
        return Err(Error::shape(
            "weighted_factorize",
            format!("importance of dim {} for {} weight rows", imp.dim(), w.rows()),
        ));
    }
    if let Some(i) = imp.diag().iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Numerical(format!(
            "importance entry {i} is {} after flooring; must be positive",
            imp.diag()[i]
        )));
    }
    Ok(())
}

fn weighted_svd(w: &Matrix, imp: &DiagonalMatrix) -> Result<SvdResult> {
    check_importance(w, imp)?;
    svd(&scale_rows(imp, w)?)
}

/// Rank-`r` factorization minimizing `‖D·W − D·A·B‖_F` for the positive
/// diagonal `imp = D`.
pub fn weighted_factorize(
    w: &Matrix,
    bias: &[f64],
    imp: &DiagonalMatrix,
    rank: RankPolicy,
) -> Result<LowRankHead> {
    if bias.len() != w.cols() {
        return Err(Error::shape(
            "weighted_factorize",
            format!("bias of length {} for {} outputs", bias.len(), w.cols()),
        ));
    }
    let full = weighted_svd(w, imp)?;
    let r = rank.select(&full.s)?;
    let top = truncate(&full, r)?;
    let a = Matrix::from_fn(w.rows(), r, |i, t| top.u[(i, t)] * top.s[t] / imp.diag()[i]);
    let b_factor = top.v.transpose();
    if !(a.is_finite() && b_factor.is_finite()) {
        return Err(Error::Numerical("weighted factors are not finite".into()));
    }
    Ok(LowRankHead {
        a,
        b_factor,
        bias: bias.to_vec(),
        rank: r,
        weighted_singular_values: full.s,
    })
}

/// First layer `d → r` (no bias) and second layer `r → k` carrying the bias.
/// Both use identity activation and start unfrozen.
pub fn build_replacement_layers(head: &LowRankHead) -> (DenseLayer, DenseLayer) {
    let l1 = DenseLayer::new(head.a.clone(), None, Activation::Identity)
        .expect("bias-free layer is always valid");
    let l2 = DenseLayer::new(head.b_factor.clone(), Some(head.bias.clone()), Activation::Identity)
        .expect("bias length checked at factorization");
    (l1, l2)
}

/// Diagnostics for one candidate rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub rank: usize,
    /// `‖D·W − D·A·B‖_F`.
    pub weighted_error: f64,
    /// `‖W − A·B‖_F`.
    pub unweighted_error: f64,
    pub retained_energy: f64,
    pub param_count: usize,
}

/// One row per rank `1..=min(d, k)`.
pub fn reconstruction_report(w: &Matrix, imp: &DiagonalMatrix) -> Result<Vec<ReportRow>> {
    let full = weighted_svd(w, imp)?;
    let weighted = scale_rows(imp, w)?;
    let energy = cumulative_energy(&full.s);
    let zero_bias = vec![0.0; w.cols()];
    (1..=full.s.len())
        .map(|r| {
            let head = weighted_factorize(w, &zero_bias, imp, RankPolicy::Fixed(r))?;
            let approx = head.product();
            Ok(ReportRow {
                rank: r,
                weighted_error: weighted.sub(&scale_rows(imp, &approx)?)?.frobenius_norm(),
                unweighted_error: w.sub(&approx)?.frobenius_norm(),
                retained_energy: energy[r - 1],
                param_count: head.param_count(),
            })
        })
        .collect()
}
