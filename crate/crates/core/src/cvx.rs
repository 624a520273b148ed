//! Convex surrogate of the aggregator's bilevel pricing problem
//!
//! ```text
//! minimize   (x - p)^T (M x + r)
//! subject to x >= 0,   ell <= M x + r <= u
//! ```
//!
//! (one or both of the response bounds depending on [`BoundMode`]). The
//! objective expands to `x^T M x + (r - M p)^T x - p^T r`, convex because
//! `M` is positive semidefinite. Every feasible `(x, Mx + r)` is a KKT point
//! of the response problem with zero bound duals, so a feasible solution
//! here is automatically consistent with the bilevel problem; the certifier
//! re-derives the response with the exact lower-level solver to confirm it
//! numerically.
//!
//! For assembled market instances `M` is block diagonal and the constraints
//! never couple blocks, so the problem separates into one small QP per
//! prosumer, solved independently (and in parallel). Optima need not be
//! unique — `M` is typically rank deficient — so value comparisons, not
//! argmin comparisons, are the meaningful ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use nalgebra::DMatrix;

use crate::llp::solve_llp;
pub use crate::llp::BoundMode;
use crate::market::{validate, MarketInstance};
use crate::qp::{solve_box_qp, QpProblem, QpSettings, QpStatus};
use crate::reduction::{ReducedMatrix, ReducedModel};
use crate::tol::Tolerances;

#[derive(Debug, Error)]
pub enum CvxError {
    #[error("optimality hypotheses violated: {details}")]
    HypothesisViolated { details: String },
    #[error("constraint set is empty")]
    Infeasible,
    #[error("objective is unbounded below on the constraint set (block {block})")]
    Unbounded { block: usize },
    #[error("iteration limit reached (primal residual {primal}, dual residual {dual})")]
    MaxIterations { primal: f64, dual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Residual summary of a convex solve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverResiduals {
    pub primal: f64,
    pub dual: f64,
    pub iterations: usize,
    pub polished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Convex,
    Oracle,
}

/// A priced solution of the bilevel problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BilevelSolution {
    /// Aggregator prices (nonnegative).
    pub x: Vec<f64>,
    /// Prosumer response `y = M x + r`.
    pub y: Vec<f64>,
    /// Objective `(x - p)^T y`.
    pub phi: f64,
    pub provenance: Provenance,
    /// Lower-level cross-check residual, filled by [`certify_bilevel`].
    pub consistency: Option<f64>,
    pub residuals: SolverResiduals,
}

/// Outcome of the bilevel-consistency check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BilevelCertificate {
    pub passed: bool,
    /// `|y_llp - y|_inf` between the stored response and the exact
    /// lower-level solution at the stored prices.
    pub response_residual: f64,
    /// `|phi(x, y_llp) - phi|`.
    pub phi_residual: f64,
}

/// Bilevel objective `(x - p)^T y`.
pub fn phi_value(p: &[f64], x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(p.iter())
        .zip(y.iter())
        .map(|((xi, pi), yi)| (xi - pi) * yi)
        .sum()
}

fn hypothesis_gate(
    reduced: &ReducedModel,
    instance: &MarketInstance,
    mode: BoundMode,
    tol: &Tolerances,
) -> Result<(), String> {
    let report = validate(instance, Some(reduced), tol);
    let mut failures = Vec::new();
    if !reduced.cert_psd.passed {
        failures.push(format!(
            "M is not PSD (min eigenvalue {:.3e})",
            reduced.cert_psd.min_eigenvalue
        ));
    }
    match mode {
        BoundMode::Both => {
            if !report.ell_nonpositive.passed {
                failures.push(format!(
                    "ell <= 0 fails at {} coordinates",
                    report.ell_nonpositive.offending.len()
                ));
            }
            if !report.u_nonnegative.passed {
                failures.push(format!(
                    "u >= 0 fails at {} coordinates",
                    report.u_nonnegative.offending.len()
                ));
            }
            if !report.u_above_r.passed {
                failures.push(format!(
                    "u > r fails at {} coordinates",
                    report.u_above_r.offending.len()
                ));
            }
        }
        BoundMode::LowerOnly => {
            if !report.ell_nonpositive.passed {
                failures.push(format!(
                    "ell <= 0 fails at {} coordinates",
                    report.ell_nonpositive.offending.len()
                ));
            }
        }
        BoundMode::UpperOnly => {
            if !reduced.cert_mmatrix.passed {
                failures.push(format!(
                    "M is not an M-matrix (max off-diagonal {:.3e})",
                    reduced.cert_mmatrix.max_off_diagonal
                ));
            }
            if !report.u_nonnegative.passed {
                failures.push(format!(
                    "u >= 0 fails at {} coordinates",
                    report.u_nonnegative.offending.len()
                ));
            }
            if !report.u_above_r.passed {
                failures.push(format!(
                    "u > r fails at {} coordinates",
                    report.u_above_r.offending.len()
                ));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures.join("; "))
    }
}

struct BlockOutcome {
    x: Vec<f64>,
    residuals: SolverResiduals,
}

#[allow(clippy::too_many_arguments)]
fn solve_piece(
    m_block: &DMatrix<f64>,
    q_lin: &[f64],
    ell: &[f64],
    u: &[f64],
    r: &[f64],
    mode: BoundMode,
    tol: &Tolerances,
    block_index: usize,
) -> Result<BlockOutcome, CvxError> {
    let k = m_block.nrows();
    let p_mat = m_block * 2.0;
    let mut a = DMatrix::zeros(2 * k, k);
    for j in 0..k {
        a[(j, j)] = 1.0;
    }
    a.view_mut((k, 0), (k, k)).copy_from(m_block);
    let mut lb = vec![0.0; 2 * k];
    let mut ub = vec![f64::INFINITY; 2 * k];
    for j in 0..k {
        lb[k + j] = if mode.has_lower() {
            ell[j] - r[j]
        } else {
            f64::NEG_INFINITY
        };
        ub[k + j] = if mode.has_upper() { u[j] - r[j] } else { f64::INFINITY };
    }
    let problem = QpProblem {
        p: &p_mat,
        q: q_lin,
        a: &a,
        lb: &lb,
        ub: &ub,
    };
    let settings = QpSettings {
        eps: tol.qp_residual,
        max_iter: 200_000,
        ..QpSettings::default()
    };
    let sol = solve_box_qp(&problem, &settings);
    match sol.status {
        QpStatus::Solved => Ok(BlockOutcome {
            x: sol.x.iter().map(|&v| v.max(0.0)).collect(),
            residuals: SolverResiduals {
                primal: sol.primal_residual,
                dual: sol.dual_residual,
                iterations: sol.iterations,
                polished: sol.polished,
            },
        }),
        QpStatus::PrimalInfeasible => Err(CvxError::Infeasible),
        QpStatus::DualInfeasible => Err(CvxError::Unbounded { block: block_index }),
        QpStatus::MaxIterations => Err(CvxError::MaxIterations {
            primal: sol.primal_residual,
            dual: sol.dual_residual,
        }),
    }
}

/// Solve the convex pricing problem for the selected bound mode.
///
/// The optimality hypotheses for the mode are verified first; `force`
/// downgrades a violation to a warning so counterexample behavior can be
/// studied (the result then carries no optimality guarantee for the
/// bilevel problem).
pub fn solve_cvx(
    reduced: &ReducedModel,
    instance: &MarketInstance,
    mode: BoundMode,
    force: bool,
    tol: &Tolerances,
) -> Result<BilevelSolution, CvxError> {
    let m = instance.m();
    if reduced.m() != m {
        return Err(CvxError::Dimension(format!(
            "reduced model of size {} against instance of size {m}",
            reduced.m()
        )));
    }
    if let Err(details) = hypothesis_gate(reduced, instance, mode, tol) {
        if !force {
            return Err(CvxError::HypothesisViolated { details });
        }
    }

    // Linear term of the QP: r - M p.
    let mp = reduced.matrix.matvec(instance.p());
    let q_lin: Vec<f64> = reduced
        .r
        .iter()
        .zip(mp.iter())
        .map(|(ri, mpi)| ri - mpi)
        .collect();

    let x = match &reduced.matrix {
        ReducedMatrix::Blocks { k, blocks } => {
            let outcomes: Vec<Result<BlockOutcome, CvxError>> = (0..blocks.len())
                .into_par_iter()
                .map(|i| {
                    let range = i * k..(i + 1) * k;
                    solve_piece(
                        &reduced.matrix.block_dense(i),
                        &q_lin[range.clone()],
                        &instance.ell()[range.clone()],
                        &instance.u()[range.clone()],
                        &reduced.r[range],
                        mode,
                        tol,
                        i,
                    )
                })
                .collect();
            let mut x = vec![0.0; m];
            let mut residuals = SolverResiduals {
                primal: 0.0,
                dual: 0.0,
                iterations: 0,
                polished: true,
            };
            for (i, outcome) in outcomes.into_iter().enumerate() {
                let outcome = outcome?;
                let range = i * k..(i + 1) * k;
                x[range].copy_from_slice(&outcome.x);
                residuals.primal = residuals.primal.max(outcome.residuals.primal);
                residuals.dual = residuals.dual.max(outcome.residuals.dual);
                residuals.iterations = residuals.iterations.max(outcome.residuals.iterations);
                residuals.polished &= outcome.residuals.polished;
            }
            (x, residuals)
        }
        ReducedMatrix::Dense(dense) => {
            let outcome = solve_piece(
                dense,
                &q_lin,
                instance.ell(),
                instance.u(),
                &reduced.r,
                mode,
                tol,
                0,
            )?;
            (outcome.x, outcome.residuals)
        }
    };
    let (x, residuals) = x;
    let y = reduced.response(&x);
    let phi = phi_value(instance.p(), &x, &y);
    Ok(BilevelSolution {
        x,
        y,
        phi,
        provenance: Provenance::Convex,
        consistency: None,
        residuals,
    })
}

/// Certify that a priced solution is consistent with the bilevel problem by
/// re-deriving the response with the exact lower-level solver.
pub fn certify_bilevel(
    instance: &MarketInstance,
    _reduced: &ReducedModel,
    solution: &BilevelSolution,
    tol: &Tolerances,
) -> BilevelCertificate {
    let llp = match solve_llp(instance, &solution.x) {
        Ok(sol) => sol,
        Err(_) => {
            return BilevelCertificate {
                passed: false,
                response_residual: f64::INFINITY,
                phi_residual: f64::INFINITY,
            }
        }
    };
    let response_residual = llp
        .y
        .iter()
        .zip(solution.y.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let phi_llp = phi_value(instance.p(), &solution.x, &llp.y);
    let phi_residual = (phi_llp - solution.phi).abs();
    BilevelCertificate {
        passed: response_residual <= tol.certify_response && phi_residual <= tol.certify_phi,
        response_residual,
        phi_residual,
    }
}

/// Solution JSON in the interchange format.
pub fn solution_json(
    solution: &BilevelSolution,
    certificate: Option<&BilevelCertificate>,
) -> serde_json::Value {
    serde_json::json!({
        "x": solution.x,
        "y": solution.y,
        "phi": solution.phi,
        "certified": certificate.is_some_and(|c| c.passed),
        "residuals": {
            "primal": solution.residuals.primal,
            "dual": solution.residuals.dual,
            "iterations": solution.residuals.iterations,
            "polished": solution.residuals.polished,
            "response": certificate.map(|c| c.response_residual),
            "phi_recompute": certificate.map(|c| c.phi_residual),
        },
        "provenance": match solution.provenance {
            Provenance::Convex => "convex",
            Provenance::Oracle => "oracle",
        },
    })
}
