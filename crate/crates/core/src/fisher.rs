//! Empirical Fisher information of the final linear layer and the per-row
//! importance diagonal derived from it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{DiagonalMatrix, Matrix};
use crate::model::{final_layer_grad, NeuralNet};

/// Relative floor applied to importance entries before inversion.
pub const IMPORTANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupTag {
    Group1,
    Group2,
    Neutralized,
}

/// Row importance `√(Σⱼ F_ij)` of a `d × k` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    diag: Vec<f64>,
    tag: GroupTag,
}

impl FisherDiagonal {
    pub fn new(diag: Vec<f64>, tag: GroupTag) -> Result<Self> {
        if let Some(i) = diag.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invariant(format!(
                "importance entry {i} is {} (must be finite and >= 0)",
                diag[i]
            )));
        }
        Ok(FisherDiagonal { diag, tag })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn tag(&self) -> GroupTag {
        self.tag
    }

    /// Importance as a diagonal matrix with entries floored at
    /// `IMPORTANCE_FLOOR · max`. Returns the matrix and the number of entries
    /// that were raised.
    pub fn floored(&self) -> Result<(DiagonalMatrix, usize)> {
        let max = self.diag.iter().copied().fold(0.0_f64, f64::max);
        if max <= 0.0 {
            return Err(Error::Numerical(
                "importance diagonal is identically zero; cannot invert".into(),
            ));
        }
        let floor = IMPORTANCE_FLOOR * max;
        let mut raised = 0;
        let diag = self
            .diag
            .iter()
            .map(|&v| {
                if v < floor {
                    raised += 1;
                    floor
                } else {
                    v
                }
            })
            .collect();
        Ok((DiagonalMatrix::new(diag), raised))
    }
}

/// Mean squared per-sample cross-entropy gradient of the final layer:
/// `(weights d × k, biases k)`.
pub fn empirical_fisher_with_bias(net: &NeuralNet, ds: &Dataset) -> Result<(Matrix, Vec<f64>)> {
    if ds.is_empty() {
        return Err(Error::Input("empirical Fisher of an empty dataset".into()));
    }
    let last = net.final_layer();
    let (logits, head_input) = net.final_layer_io(&ds.x)?;
    let (d, k) = (last.in_dim(), last.out_dim());
    let mut fw = Matrix::zeros(d, k);
    let mut fb = vec![0.0; k];
    for n in 0..ds.len() {
        let (gw, gb) = final_layer_grad(head_input.row(n), logits.row(n), ds.y[n]);
        for (acc, g) in fw.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *acc += g * g;
        }
        for (acc, g) in fb.iter_mut().zip(&gb) {
            *acc += g * g;
        }
    }
    let inv_n = 1.0 / ds.len() as f64;
    Ok((fw.scale(inv_n), fb.iter().map(|v| v * inv_n).collect()))
}

/// Entry `(i, j)` is `(1/N) Σₙ (∂Lₙ/∂W_ij)²` for the final-layer weight.
pub fn empirical_fisher(net: &NeuralNet, ds: &Dataset) -> Result<Matrix> {
    Ok(empirical_fisher_with_bias(net, ds)?.0)
}

/// `diag[i] = √(Σⱼ fisher[i][j])`.
pub fn row_importance(fisher: &Matrix, tag: GroupTag) -> Result<FisherDiagonal> {
    if let Some(pos) = fisher.as_slice().iter().position(|&v| v < 0.0) {
        return Err(Error::Invariant(format!(
            "negative Fisher entry at ({}, {})",
            pos / fisher.cols(),
            pos % fisher.cols()
        )));
    }
    let diag = (0..fisher.rows())
        .map(|i| fisher.row(i).iter().sum::<f64>().sqrt())
        .collect();
    FisherDiagonal::new(diag, tag)
}

/// `α·a + (1 − α)·b` for `α ∈ [0.5, 1)`.
pub fn blend(a: &FisherDiagonal, b: &FisherDiagonal, alpha: f64) -> Result<FisherDiagonal> {
    if !(0.5..1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha must lie in [0.5, 1), got {alpha}")));
    }
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "blend",
            format!("importance dims {} and {}", a.dim(), b.dim()),
        ));
    }
    let diag = a
        .diag
        .iter()
        .zip(&b.diag)
        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
        .collect();
    FisherDiagonal::new(diag, GroupTag::Neutralized)
}

/// Element-wise mean of two group importances.
pub fn neutralize(a: &FisherDiagonal, b: &FisherDiagonal) -> Result<FisherDiagonal> {
    blend(a, b, 0.5)
}

/// Row importances of both groups of `ds`, measured on the same network.
pub fn group_importances(net: &NeuralNet, ds: &Dataset) -> Result<(FisherDiagonal, FisherDiagonal)> {
    let g1 = ds.group_subset(1)?;
    let g2 = ds.group_subset(2)?;
    Ok((
        row_importance(&empirical_fisher(net, &g1)?, GroupTag::Group1)?,
        row_importance(&empirical_fisher(net, &g2)?, GroupTag::Group2)?,
    ))
}

/// One row per final-layer parameter: weights in row-major order, then
/// biases.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRow {
    pub index: usize,
    pub group1: f64,
    pub group2: f64,
    pub is_bias: bool,
}

pub fn fisher_heatmap_rows(
    net1: &NeuralNet,
    ds_group1: &Dataset,
    net2: &NeuralNet,
    ds_group2: &Dataset,
) -> Result<Vec<HeatmapRow>> {
    if ds_group1.is_empty() || ds_group2.is_empty() {
        return Err(Error::GroupEmpty {
            group: if ds_group1.is_empty() { 1 } else { 2 },
            context: " for the Fisher heatmap".into(),
        });
    }
    let (w1, b1) = empirical_fisher_with_bias(net1, ds_group1)?;
    let (w2, b2) = empirical_fisher_with_bias(net2, ds_group2)?;
    if w1.rows() != w2.rows() || w1.cols() != w2.cols() {
        return Err(Error::shape("fisher heatmap", "networks have different final layers"));
    }
    let weights = w1.as_slice().iter().zip(w2.as_slice()).map(|(a, b)| (*a, *b, false));
    let biases = b1.iter().zip(&b2).map(|(a, b)| (*a, *b, true));
    Ok(weights
        .chain(biases)
        .enumerate()
        .map(|(index, (group1, group2, is_bias))| HeatmapRow {
            index,
            group1,
            group2,
            is_bias,
        })
        .collect())
}

/// Writes the per-parameter Fisher diagonal of both groups as CSV with
/// columns `index,group1,group2,is_bias`. `header` lines are emitted first
/// as `#` comments.
pub fn export_fisher_heatmap(
    net: &NeuralNet,
    ds_group1: &Dataset,
    ds_group2: &Dataset,
    out_path: &Path,
    header: &[String],
) -> Result<Vec<HeatmapRow>> {
    let rows = fisher_heatmap_rows(net, ds_group1, net, ds_group2)?;
    write_heatmap(&rows, out_path, header)?;
    Ok(rows)
}

pub fn write_heatmap(rows: &[HeatmapRow], out_path: &Path, header: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for line in header {
        writeln!(buf, "# {line}").expect("write to vec");
    }
    writeln!(buf, "index,group1,group2,is_bias").expect("write to vec");
    for r in rows {
        writeln!(buf, "{},{:e},{:e},{}", r.index, r.group1, r.group2, u8::from(r.is_bias))
            .expect("write to vec");
    }
    std::fs::write(out_path, buf).map_err(|e| Error::io(out_path, e))
}
