//! Elimination of the equality-constraint dual from the lower-level KKT
//! system.
//!
//! For positive definite `R` and full-row-rank `F`, solving the stationarity
//! equation for `y` and substituting into `Fy = d` eliminates the equality
//! dual and leaves the affine response map `y = M(x + mu - nu) + r` with
//!
//! ```text
//! M = R^-1 - R^-1 F^T (F R^-1 F^T)^-1 F R^-1
//! r = R^-1 F^T (F R^-1 F^T)^-1 d - M c
//! ```
//!
//! `M` is the Schur complement of `F R^-1 F^T` in the Gram matrix of
//! `[R^-1/2; F R^-1/2]`, hence positive semidefinite. When `R` is diagonal
//! and `F` is the per-prosumer aggregation structure, each diagonal block of
//! `M` has the closed form `D - w w^T / t` with `D = diag(1/q)`, `w = D 1`,
//! `t = 1^T D 1`, and no dense inverse is ever formed.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::MarketInstance;
use crate::tol::Tolerances;

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("matrix {what} is not symmetric (|A - A^T|_inf = {residual})")]
    NotSymmetric { what: &'static str, residual: f64 },
    #[error("R is not positive definite")]
    NotPositiveDefinite,
    #[error("F is rank deficient (condition estimate {cond:.3e} of F R^-1 F^T)")]
    RankDeficient { cond: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// PSD certificate with its eigenvalue witness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PsdCertificate {
    pub passed: bool,
    pub min_eigenvalue: f64,
}

/// M-matrix certificate: PSD plus nonpositive off-diagonal entries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MmatrixCertificate {
    pub passed: bool,
    pub max_off_diagonal: f64,
    pub min_eigenvalue: f64,
}

/// Storage for the reduced matrix `M`.
///
/// `Blocks` keeps the per-prosumer closed form (`diag(inv_q) - w w^T / t`
/// per block) and is the only representation used for assembled market
/// instances; `Dense` serves the general experiments with non-diagonal `R`.
#[derive(Debug, Clone)]
pub enum ReducedMatrix {
    Dense(DMatrix<f64>),
    Blocks { k: usize, blocks: Vec<ResponseBlock> },
}

/// One diagonal block of the structured reduced matrix.
#[derive(Debug, Clone)]
pub struct ResponseBlock {
    /// Reciprocal weights `1/q` on this block.
    pub inv_q: Vec<f64>,
    /// `t = sum_k 1/q_k`.
    pub weight: f64,
}

impl ResponseBlock {
    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let dot: f64 = self.inv_q.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let scale = dot / self.weight;
        for ((o, &w), &xi) in out.iter_mut().zip(self.inv_q.iter()).zip(x.iter()) {
            *o = w * xi - w * scale;
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let k = self.inv_q.len();
        let mut block = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let rank_one = self.inv_q[i] * self.inv_q[j] / self.weight;
                block[(i, j)] = if i == j { self.inv_q[i] - rank_one } else { -rank_one };
            }
        }
        block
    }
}

impl ReducedMatrix {
    pub fn dim(&self) -> usize {
        match self {
            ReducedMatrix::Dense(m) => m.nrows(),
            ReducedMatrix::Blocks { k, blocks } => k * blocks.len(),
        }
    }

    pub fn is_structured(&self) -> bool {
        matches!(self, ReducedMatrix::Blocks { .. })
    }

    /// `M x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        match self {
            ReducedMatrix::Dense(m) => {
                let v = m * DVector::from_column_slice(x);
                v.as_slice().to_vec()
            }
            ReducedMatrix::Blocks { k, blocks } => {
                let mut out = vec![0.0; x.len()];
                for (i, block) in blocks.iter().enumerate() {
                    block.matvec(&x[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
                }
                out
            }
        }
    }

    /// Materialize the full matrix. Intended for small systems and dumps.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ReducedMatrix::Dense(m) => m.clone(),
            ReducedMatrix::Blocks { k, blocks } => {
                let m = self.dim();
                let mut out = DMatrix::zeros(m, m);
                for (i, block) in blocks.iter().enumerate() {
                    out.view_mut((i * k, i * k), (*k, *k)).copy_from(&block.to_dense());
                }
                out
            }
        }
    }

    /// Dense copy of diagonal block `i` (structured storage only).
    pub fn block_dense(&self, i: usize) -> DMatrix<f64> {
        match self {
            ReducedMatrix::Dense(_) => panic!("block_dense on dense storage"),
            ReducedMatrix::Blocks { blocks, .. } => blocks[i].to_dense(),
        }
    }

    fn certificates(&self, tol: &Tolerances) -> (PsdCertificate, MmatrixCertificate) {
        match self {
            ReducedMatrix::Dense(m) => {
                let psd = check_psd(m, tol).expect("reduced matrix is symmetric by construction");
                let mm = check_mmatrix(m, tol).expect("reduced matrix is symmetric by construction");
                (psd, mm)
            }
            ReducedMatrix::Blocks { k, blocks } => {
                // Block-diagonal: the spectrum is the union of block spectra and
                // cross-block off-diagonals are exactly zero.
                let mut min_eig = f64::INFINITY;
                let mut max_off = if blocks.len() > 1 { 0.0 } else { f64::NEG_INFINITY };
                for block in blocks {
                    let dense = block.to_dense();
                    let eigs = dense.clone().symmetric_eigen().eigenvalues;
                    min_eig = min_eig.min(eigs.iter().copied().fold(f64::INFINITY, f64::min));
                    for i in 0..*k {
                        for j in 0..*k {
                            if i != j {
                                max_off = max_off.max(dense[(i, j)]);
                            }
                        }
                    }
                }
                if !min_eig.is_finite() {
                    min_eig = 0.0;
                }
                if max_off == f64::NEG_INFINITY {
                    max_off = 0.0;
                }
                let psd = PsdCertificate {
                    passed: min_eig >= -tol.psd_eigenvalue,
                    min_eigenvalue: min_eig,
                };
                let mm = MmatrixCertificate {
                    passed: psd.passed && max_off <= tol.mmatrix_offdiag,
                    max_off_diagonal: max_off,
                    min_eigenvalue: min_eig,
                };
                (psd, mm)
            }
        }
    }
}

/// The eliminated KKT pair `(M, r)` plus structural certificates.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub matrix: ReducedMatrix,
    pub r: Vec<f64>,
    pub cert_psd: PsdCertificate,
    pub cert_mmatrix: MmatrixCertificate,
    /// Preconditions of the structured M-matrix guarantee held
    /// (diagonal `R`, nonpositive `F` with orthogonal rows).
    pub cert_structured: bool,
}

impl ReducedModel {
    pub fn m(&self) -> usize {
        self.matrix.dim()
    }

    /// Affine response `y = M x + r`.
    pub fn response(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.matvec(x);
        for (yi, ri) in y.iter_mut().zip(self.r.iter()) {
            *yi += ri;
        }
        y
    }
}

fn symmetry_residual(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn matrix_scale(m: &DMatrix<f64>) -> f64 {
    1.0 + m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// PSD test by symmetric eigendecomposition; the witness is the smallest
/// eigenvalue.
pub fn check_psd(m: &DMatrix<f64>, tol: &Tolerances) -> Result<PsdCertificate, ReductionError> {
    let residual = symmetry_residual(m);
    if residual > tol.symmetry * matrix_scale(m) {
        return Err(ReductionError::NotSymmetric { what: "M", residual });
    }
    let min_eigenvalue = if m.nrows() == 0 {
        0.0
    } else {
        m.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    };
    Ok(PsdCertificate {
        passed: min_eigenvalue >= -tol.psd_eigenvalue,
        min_eigenvalue,
    })
}

/// M-matrix test for symmetric input: PSD with nonpositive off-diagonals.
pub fn check_mmatrix(m: &DMatrix<f64>, tol: &Tolerances) -> Result<MmatrixCertificate, ReductionError> {
    let psd = check_psd(m, tol)?;
    let mut max_off = f64::NEG_INFINITY;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                max_off = max_off.max(m[(i, j)]);
            }
        }
    }
    if max_off == f64::NEG_INFINITY {
        max_off = 0.0;
    }
    Ok(MmatrixCertificate {
        passed: psd.passed && max_off <= tol.mmatrix_offdiag,
        max_off_diagonal: max_off,
        min_eigenvalue: psd.min_eigenvalue,
    })
}

/// Preconditions under which the reduced matrix is guaranteed to be an
/// M-matrix: `F` entrywise nonpositive with mutually orthogonal rows, and
/// `R` diagonal.
pub fn check_structured_preconditions(
    r: &DMatrix<f64>,
    f: &DMatrix<f64>,
    tol: &Tolerances,
) -> bool {
    let scale_r = matrix_scale(r);
    for i in 0..r.nrows() {
        for j in 0..r.ncols() {
            if i != j && r[(i, j)].abs() > tol.symmetry * scale_r {
                return false;
            }
        }
    }
    let scale_f = matrix_scale(f);
    if f.iter().any(|&v| v > tol.symmetry * scale_f) {
        return false;
    }
    let gram = f * f.transpose();
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            if i != j && gram[(i, j)].abs() > tol.symmetry * matrix_scale(&gram) {
                return false;
            }
        }
    }
    true
}

/// Dense-path reduction for general positive definite `R` and full-row-rank
/// `F`.
pub fn compute_reduced(
    r_mat: &DMatrix<f64>,
    f_mat: &DMatrix<f64>,
    c: &[f64],
    d: &[f64],
    tol: &Tolerances,
) -> Result<ReducedModel, ReductionError> {
    let m = r_mat.nrows();
    if r_mat.ncols() != m {
        return Err(ReductionError::Dimension("R must be square".into()));
    }
    let n = f_mat.nrows();
    if f_mat.ncols() != m {
        return Err(ReductionError::Dimension(format!(
            "F has {} columns, expected {m}",
            f_mat.ncols()
        )));
    }
    if n == 0 || n > m {
        return Err(ReductionError::Dimension(format!(
            "F must have between 1 and {m} rows, found {n}"
        )));
    }
    if c.len() != m || d.len() != n {
        return Err(ReductionError::Dimension("c or d length mismatch".into()));
    }
    let residual = symmetry_residual(r_mat);
    if residual > tol.symmetry * matrix_scale(r_mat) {
        return Err(ReductionError::NotSymmetric { what: "R", residual });
    }
    let chol = r_mat
        .clone()
        .cholesky()
        .ok_or(ReductionError::NotPositiveDefinite)?;

    // W = R^-1 F^T, S = F R^-1 F^T.
    let w = chol.solve(&f_mat.transpose());
    let mut s = f_mat * &w;
    s = (&s + s.transpose()) * 0.5;
    let s_eigs = s.clone().symmetric_eigen().eigenvalues;
    let s_min = s_eigs.iter().copied().fold(f64::INFINITY, f64::min);
    let s_max = s_eigs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if s_min <= 0.0 {
        return Err(ReductionError::RankDeficient { cond: f64::INFINITY });
    }
    let cond = s_max / s_min;
    if cond > tol.condition_cap {
        return Err(ReductionError::RankDeficient { cond });
    }
    let s_chol = s
        .clone()
        .cholesky()
        .ok_or(ReductionError::RankDeficient { cond })?;
    // Iteratively refined solve against S; the identities M F^T = 0 and
    // F r = d inherit the residual of these solves, so a plain factored
    // solve is not tight enough when S is ill conditioned.
    let s_solve = |rhs: &DMatrix<f64>| -> DMatrix<f64> {
        let mut sol = s_chol.solve(rhs);
        for _ in 0..2 {
            let resid = rhs - &s * &sol;
            sol += s_chol.solve(&resid);
        }
        sol
    };

    let r_inv = chol.solve(&DMatrix::identity(m, m));
    let mut reduced = &r_inv - &w * s_solve(&w.transpose());
    reduced = (&reduced + reduced.transpose()) * 0.5;

    let d_mat = DMatrix::from_column_slice(n, 1, d);
    let c_mat = DMatrix::from_column_slice(m, 1, c);
    let mut r_vec = &w * s_solve(&d_mat) - &reduced * c_mat;
    // Refine r against its defining identity F r = d; the -M c term leaks
    // the annihilation error of M into the equality rows otherwise.
    for _ in 0..2 {
        let resid = &d_mat - f_mat * &r_vec;
        r_vec += &w * s_solve(&resid);
    }

    let matrix = ReducedMatrix::Dense(reduced);
    let (cert_psd, cert_mmatrix) = matrix.certificates(tol);
    let cert_structured = check_structured_preconditions(r_mat, f_mat, tol);
    Ok(ReducedModel {
        matrix,
        r: r_vec.as_slice().to_vec(),
        cert_psd,
        cert_mmatrix,
        cert_structured,
    })
}

/// Structured reduction for an assembled market instance: closed-form
/// per-block `M` and `r` without any dense inverse.
pub fn reduce_instance(instance: &MarketInstance, tol: &Tolerances) -> ReducedModel {
    let k = instance.horizon();
    let n = instance.n();
    let mut blocks = Vec::with_capacity(n);
    let mut r = vec![0.0; instance.m()];
    for i in 0..n {
        let range = instance.block(i);
        let inv_q: Vec<f64> = instance.q()[range.clone()].iter().map(|&q| 1.0 / q).collect();
        let weight: f64 = inv_q.iter().sum();
        let c_block = &instance.c()[range.clone()];
        // M_b c_b via the diag-minus-rank-one structure.
        let dot: f64 = inv_q.iter().zip(c_block.iter()).map(|(a, b)| a * b).sum();
        let d_i = instance.d()[i];
        for (offset, slot) in r[range].iter_mut().enumerate() {
            let mc = inv_q[offset] * c_block[offset] - inv_q[offset] * dot / weight;
            // r = R^-1 F^T (F R^-1 F^T)^-1 d - M c with F_b = -1^T.
            *slot = -inv_q[offset] * d_i / weight - mc;
        }
        blocks.push(ResponseBlock { inv_q, weight });
    }
    let matrix = ReducedMatrix::Blocks { k, blocks };
    let (cert_psd, cert_mmatrix) = matrix.certificates(tol);
    ReducedModel {
        matrix,
        r,
        cert_psd,
        cert_mmatrix,
        cert_structured: true,
    }
}

/// Write a matrix in the plain text interchange format: one row per line,
/// entries space-separated.
pub fn write_matrix_text<W: Write>(out: &mut W, m: &DMatrix<f64>) -> io::Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Write a vector as a single space-separated line.
pub fn write_vector_text<W: Write>(out: &mut W, v: &[f64]) -> io::Result<()> {
    let row: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
    writeln!(out, "{}", row.join(" "))
}
