//! Dense row-major matrices and a one-sided Jacobi SVD.
//!
//! The kernel targets desk-scale problems (a few thousand rows at most) where
//! accuracy matters more than throughput. Results are deterministic: singular
//! values come out in descending order with ties kept in column order, and
//! each left singular vector has its largest-magnitude entry non-negative.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative off-diagonal threshold for declaring a column pair orthogonal.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Maximum number of full Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting bad lengths and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} entries for {rows}x{cols}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// First `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        Matrix::from_fn(self.rows, n, |i, j| self[(i, j)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "sub",
                format!(
                    "{}x{} - {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Square diagonal matrix stored as its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalMatrix {
    diag: Vec<f64>,
}

impl DiagonalMatrix {
    pub fn new(diag: Vec<f64>) -> Self {
        DiagonalMatrix { diag }
    }

    pub fn identity(dim: usize) -> Self {
        DiagonalMatrix {
            diag: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn expand(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim(), self.dim());
        for (i, &d) in self.diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }
}

/// Thin SVD `m = u · diag(s) · vᵀ` with `p = min(rows, cols)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n, p) = (self.u.rows(), self.v.rows(), self.s.len());
        Matrix::from_fn(m, n, |i, j| {
            (0..p)
                .map(|t| self.u[(i, t)] * self.s[t] * self.v[(j, t)])
                .sum()
        })
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            for (o, &b_tj) in out_row.iter_mut().zip(b.row(t)) {
                *o += a_it * b_tj;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::Numerical("matmul overflowed".into()));
    }
    Ok(out)
}

/// `diag(d) · m`: row `i` of `m` multiplied by `d[i]`.
pub fn scale_rows(d: &DiagonalMatrix, m: &Matrix) -> Result<Matrix> {
    if d.dim() != m.rows {
        return Err(Error::shape(
            "scale_rows",
            format!("diag of dim {} against {} rows", d.dim(), m.rows),
        ));
    }
    let mut out = m.clone();
    for (i, &w) in d.diag.iter().enumerate() {
        for v in out.row_mut(i) {
            *v *= w;
        }
    }
    Ok(out)
}

/// Keeps the leading `r` singular triplets.
pub fn truncate(svd: &SvdResult, r: usize) -> Result<SvdResult> {
    let p = svd.s.len();
    if r == 0 || r > p {
        return Err(Error::Rank { rank: r, max: p });
    }
    Ok(SvdResult {
        u: svd.u.leading_columns(r),
        s: svd.s[..r].to_vec(),
        v: svd.v.leading_columns(r),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Thin singular value decomposition by one-sided Jacobi rotations.
///
/// Wide inputs are decomposed through their transpose so the rotations always
/// act on the shorter dimension.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Input(format!(
            "svd needs a non-empty matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    if !m.is_finite() {
        return Err(Error::Input("svd input has non-finite entries".into()));
    }
    let transposed = m.rows < m.cols;
    let tall = if transposed { m.transpose() } else { m.clone() };
    let (rows, n) = (tall.rows, tall.cols);

    // Column-major working copies: A's columns and V's columns.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| tall.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut residual = 0.0_f64;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= JACOBI_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if residual <= JACOBI_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in original column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s_max = norms[order[0]];
    let negligible = s_max * f64::EPSILON * rows as f64;
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for &j in &order {
        if norms[j] > negligible && norms[j] > 0.0 {
            u_cols.push(Some(a[j].iter().map(|x| x / norms[j]).collect()));
        } else {
            u_cols.push(None);
        }
    }
    let u_cols = complete_orthonormal(u_cols, rows);

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_tall = Matrix::from_fn(rows, n, |i, t| u_cols[t][i]);
    let mut v_tall = Matrix::from_fn(n, n, |i, t| v[order[t]][i]);
    if transposed {
        std::mem::swap(&mut u_tall, &mut v_tall);
    }
    fix_signs(&mut u_tall, &mut v_tall);

    let result = SvdResult {
        u: u_tall,
        s,
        v: v_tall,
    };
    if !(result.u.is_finite() && result.v.is_finite()) {
        return Err(Error::Numerical("svd produced non-finite factors".into()));
    }
    Ok(result)
}

/// Fills missing columns (null singular directions) with unit vectors
/// orthogonal to every other column, via Gram-Schmidt on the standard basis.
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for k in 0..dim {
                    let mut e = vec![0.0; dim];
                    e[k] = 1.0;
                    for _ in 0..2 {
                        for b in &done {
                            let proj = dot(&e, b);
                            for (x, y) in e.iter_mut().zip(b) {
                                *x -= proj * y;
                            }
                        }
                    }
                    let norm = dot(&e, &e).sqrt();
                    if best.as_ref().is_none_or(|(n, _)| norm > *n + 1e-12) {
                        best = Some((norm, e));
                    }
                }
                let (norm, e) = best.expect("dim > 0");
                let unit: Vec<f64> = e.iter().map(|x| x / norm).collect();
                done.push(unit.clone());
                out.push(unit);
            }
        }
    }
    out
}

fn fix_signs(u: &mut Matrix, v: &mut Matrix) {
    for t in 0..u.cols() {
        let mut pivot = 0.0_f64;
        for i in 0..u.rows() {
            if u[(i, t)].abs() > pivot.abs() {
                pivot = u[(i, t)];
            }
        }
        if pivot < 0.0 {
            for i in 0..u.rows() {
                u[(i, t)] = -u[(i, t)];
            }
            for i in 0..v.rows() {
                v[(i, t)] = -v[(i, t)];
            }
        }
    }
}
