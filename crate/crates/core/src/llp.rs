//! Exact solver for the prosumers' response problem
//!
//! ```text
//! minimize   (1/2) y^T Q y + (c - x)^T y
//! subject to ell <= y <= u,   (Ey)_i = d_i
//! ```
//!
//! `Q` is diagonal positive and the equality couples only coordinates of the
//! same prosumer, so the problem splits into independent blocks. Within a
//! block the KKT stationarity gives `y_k(lambda) = clip((x_k - c_k +
//! lambda)/q_k, ell_k, u_k)`, a nondecreasing function of the block's
//! equality dual `lambda`, and the dual is located by bisection on
//! `sum_k y_k(lambda) = -d_i`. Bound duals are recovered from the clipped
//! coordinates afterwards.
//!
//! [`solve_llp_general`] handles the variants with non-diagonal `R`, a
//! general full-row-rank `F`, and optional one-sided bounds through the
//! splitting engine in [`crate::qp`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::MarketInstance;
use crate::qp::{solve_box_qp, QpProblem, QpSettings, QpStatus};
use crate::tol::Tolerances;

/// Which inequality bounds the response problem keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundMode {
    Both,
    LowerOnly,
    UpperOnly,
}

impl BoundMode {
    pub fn has_lower(self) -> bool {
        !matches!(self, BoundMode::UpperOnly)
    }

    pub fn has_upper(self) -> bool {
        !matches!(self, BoundMode::LowerOnly)
    }
}

/// Primal/dual solution of the response problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlpSolution {
    /// Net exchange per prosumer-step.
    pub y: Vec<f64>,
    /// Equality duals, one per prosumer.
    pub lambda: Vec<f64>,
    /// Lower-bound duals (nonnegative).
    pub mu: Vec<f64>,
    /// Upper-bound duals (nonnegative).
    pub nu: Vec<f64>,
    /// Max-norm KKT residual at the returned point.
    pub kkt_residual: f64,
}

#[derive(Debug, Error)]
pub enum LlpError {
    #[error("prosumer {prosumer} block infeasible: reachable range [{lo}, {hi}] misses target {target}")]
    InfeasibleBlock {
        prosumer: usize,
        lo: f64,
        target: f64,
        hi: f64,
    },
    #[error("bisection stalled on prosumer {prosumer}: interval width {width}, equality residual {residual}")]
    BisectionStalled {
        prosumer: usize,
        width: f64,
        residual: f64,
    },
    #[error("iteration limit reached with KKT residual {residual}")]
    MaxIterations {
        residual: f64,
        solution: Box<LlpSolution>,
    },
    #[error("feasible set is empty")]
    Infeasible,
    #[error("R is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Solve the response problem with both bounds.
pub fn solve_llp(instance: &MarketInstance, x: &[f64]) -> Result<LlpSolution, LlpError> {
    solve_llp_mode(instance, x, BoundMode::Both)
}

/// Solve the response problem with the selected bounds present.
pub fn solve_llp_mode(
    instance: &MarketInstance,
    x: &[f64],
    mode: BoundMode,
) -> Result<LlpSolution, LlpError> {
    let m = instance.m();
    if x.len() != m {
        return Err(LlpError::Dimension(format!(
            "x has length {}, expected {m}",
            x.len()
        )));
    }
    let tol = Tolerances::default();
    let mut y = vec![0.0; m];
    let mut mu = vec![0.0; m];
    let mut nu = vec![0.0; m];
    let mut lambda = vec![0.0; instance.n()];
    for i in 0..instance.n() {
        let range = instance.block(i);
        let block = BlockData {
            q: &instance.q()[range.clone()],
            c: &instance.c()[range.clone()],
            ell: &instance.ell()[range.clone()],
            u: &instance.u()[range.clone()],
            x: &x[range.clone()],
            target: -instance.d()[i],
            mode,
        };
        let solved = solve_block(&block, i, &tol)?;
        y[range.clone()].copy_from_slice(&solved.y);
        mu[range.clone()].copy_from_slice(&solved.mu);
        nu[range].copy_from_slice(&solved.nu);
        lambda[i] = solved.lambda;
    }
    let mut solution = LlpSolution {
        y,
        lambda,
        mu,
        nu,
        kkt_residual: 0.0,
    };
    solution.kkt_residual = kkt_residual_mode(instance, x, &solution, mode);
    Ok(solution)
}

struct BlockData<'a> {
    q: &'a [f64],
    c: &'a [f64],
    ell: &'a [f64],
    u: &'a [f64],
    x: &'a [f64],
    target: f64,
    mode: BoundMode,
}

struct BlockSolution {
    y: Vec<f64>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    lambda: f64,
}

impl BlockData<'_> {
    fn lower(&self, k: usize) -> f64 {
        if self.mode.has_lower() {
            self.ell[k]
        } else {
            f64::NEG_INFINITY
        }
    }

    fn upper(&self, k: usize) -> f64 {
        if self.mode.has_upper() {
            self.u[k]
        } else {
            f64::INFINITY
        }
    }

    fn response(&self, k: usize, lambda: f64) -> f64 {
        let raw = (self.x[k] - self.c[k] + lambda) / self.q[k];
        raw.max(self.lower(k)).min(self.upper(k))
    }

    /// `sum_k y_k(lambda) - target`; nondecreasing in `lambda`.
    fn excess(&self, lambda: f64, pinned: &[bool]) -> f64 {
        let mut total = -self.target;
        for k in 0..self.q.len() {
            total += if pinned[k] { self.ell[k] } else { self.response(k, lambda) };
        }
        total
    }
}

fn solve_block(block: &BlockData, prosumer: usize, tol: &Tolerances) -> Result<BlockSolution, LlpError> {
    let k = block.q.len();
    // Degenerate coordinates with ell == u are pinned before the dual search.
    let pinned: Vec<bool> = (0..k)
        .map(|j| {
            block.mode == BoundMode::Both
                && block.u[j] - block.ell[j] <= f64::EPSILON * (1.0 + block.u[j].abs())
        })
        .collect();

    let mut reach_lo = 0.0;
    let mut reach_hi = 0.0;
    for j in 0..k {
        if pinned[j] {
            reach_lo += block.ell[j];
            reach_hi += block.ell[j];
        } else {
            reach_lo += block.lower(j);
            reach_hi += block.upper(j);
        }
    }
    let slack = tol.assumption * (1.0 + block.target.abs());
    if block.target < reach_lo - slack || block.target > reach_hi + slack {
        return Err(LlpError::InfeasibleBlock {
            prosumer,
            lo: reach_lo,
            target: block.target,
            hi: reach_hi,
        });
    }

    let lambda = if pinned.iter().all(|&p| p) {
        0.0
    } else {
        bisect_dual(block, &pinned, prosumer, tol)?
    };

    let mut y = vec![0.0; k];
    let mut mu = vec![0.0; k];
    let mut nu = vec![0.0; k];
    for j in 0..k {
        if pinned[j] {
            y[j] = block.ell[j];
            // Stationarity decides which of the coincident bounds carries
            // the dual.
            let w = block.q[j] * y[j] + block.c[j] - block.x[j] - lambda;
            if w >= 0.0 {
                mu[j] = w;
            } else {
                nu[j] = -w;
            }
            continue;
        }
        let raw = (block.x[j] - block.c[j] + lambda) / block.q[j];
        let lo = block.lower(j);
        let hi = block.upper(j);
        if raw < lo {
            y[j] = lo;
            mu[j] = (block.q[j] * lo + block.c[j] - block.x[j] - lambda).max(0.0);
        } else if raw > hi {
            y[j] = hi;
            nu[j] = (block.x[j] + lambda - block.q[j] * hi - block.c[j]).max(0.0);
        } else {
            y[j] = raw;
        }
    }
    Ok(BlockSolution { y, mu, nu, lambda })
}

/// Locate the equality dual by bisection. The initial bracket comes from the
/// saturation points of the clipped affine map and is doubled outward when a
/// side is unbounded.
fn bisect_dual(
    block: &BlockData,
    pinned: &[bool],
    prosumer: usize,
    tol: &Tolerances,
) -> Result<f64, LlpError> {
    let k = block.q.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for j in 0..k {
        if pinned[j] {
            continue;
        }
        let low_sat = block.q[j] * block.lower(j) + block.c[j] - block.x[j];
        let high_sat = block.q[j] * block.upper(j) + block.c[j] - block.x[j];
        if low_sat.is_finite() {
            lo = lo.min(low_sat);
        }
        if high_sat.is_finite() {
            hi = hi.max(high_sat);
        }
    }
    if !lo.is_finite() {
        lo = if hi.is_finite() { hi - 1.0 } else { -1.0 };
    }
    if !hi.is_finite() {
        hi = lo + 1.0;
    }

    let mut g_lo = block.excess(lo, pinned);
    let mut g_hi = block.excess(hi, pinned);
    let mut width = (hi - lo).abs().max(1.0);
    let mut guard = 0;
    while g_lo > 0.0 {
        if g_lo <= tol.bisection_equality {
            return Ok(lo);
        }
        lo -= width;
        width *= 2.0;
        g_lo = block.excess(lo, pinned);
        guard += 1;
        if guard > 100 {
            return Err(LlpError::InfeasibleBlock {
                prosumer,
                lo: g_lo,
                target: block.target,
                hi: g_hi,
            });
        }
    }
    guard = 0;
    width = (hi - lo).abs().max(1.0);
    while g_hi < 0.0 {
        if -g_hi <= tol.bisection_equality {
            return Ok(hi);
        }
        hi += width;
        width *= 2.0;
        g_hi = block.excess(hi, pinned);
        guard += 1;
        if guard > 100 {
            return Err(LlpError::InfeasibleBlock {
                prosumer,
                lo: g_lo,
                target: block.target,
                hi: g_hi,
            });
        }
    }

    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break; // floating-point floor
        }
        let g_mid = block.excess(mid, pinned);
        if g_mid <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        let width = hi - lo;
        if width <= tol.bisection_width * (1.0 + mid.abs())
            && g_mid.abs() <= tol.bisection_equality
        {
            return Ok(mid);
        }
    }
    // Pick the better endpoint before giving up.
    let candidates = [lo, mid, hi];
    let best = candidates
        .iter()
        .copied()
        .min_by(|a, b| {
            block
                .excess(*a, pinned)
                .abs()
                .total_cmp(&block.excess(*b, pinned).abs())
        })
        .unwrap();
    let residual = block.excess(best, pinned).abs();
    if residual <= tol.bisection_equality {
        Ok(best)
    } else {
        Err(LlpError::BisectionStalled {
            prosumer,
            width: hi - lo,
            residual,
        })
    }
}

/// Max-norm KKT residual of a candidate solution (both bounds).
pub fn kkt_residual(instance: &MarketInstance, x: &[f64], solution: &LlpSolution) -> f64 {
    kkt_residual_mode(instance, x, solution, BoundMode::Both)
}

/// Max-norm residual over stationarity, primal feasibility, dual
/// nonnegativity, and complementarity; zero exactly at a KKT point.
pub fn kkt_residual_mode(
    instance: &MarketInstance,
    x: &[f64],
    solution: &LlpSolution,
    mode: BoundMode,
) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..instance.n() {
        let range = instance.block(i);
        let mut sum = 0.0;
        for j in range.clone() {
            let y = solution.y[j];
            sum += y;
            let stationarity = instance.q()[j] * y + instance.c()[j] - x[j]
                - solution.lambda[i]
                - solution.mu[j]
                + solution.nu[j];
            worst = worst.max(stationarity.abs());
            worst = worst.max(-solution.mu[j]);
            worst = worst.max(-solution.nu[j]);
            if mode.has_lower() {
                worst = worst.max(instance.ell()[j] - y);
                worst = worst.max((solution.mu[j] * (y - instance.ell()[j])).abs());
            } else {
                worst = worst.max(solution.mu[j].abs());
            }
            if mode.has_upper() {
                worst = worst.max(y - instance.u()[j]);
                worst = worst.max((solution.nu[j] * (instance.u()[j] - y)).abs());
            } else {
                worst = worst.max(solution.nu[j].abs());
            }
        }
        worst = worst.max((-sum - instance.d()[i]).abs());
    }
    worst
}

/// KKT residual for the general formulation with dense `R` and `F`.
#[allow(clippy::too_many_arguments)]
pub fn kkt_residual_general(
    r_mat: &DMatrix<f64>,
    f_mat: &DMatrix<f64>,
    c: &[f64],
    d: &[f64],
    ell: Option<&[f64]>,
    u: Option<&[f64]>,
    x: &[f64],
    solution: &LlpSolution,
) -> f64 {
    let yv = DVector::from_column_slice(&solution.y);
    let lam = DVector::from_column_slice(&solution.lambda);
    let stat = r_mat * &yv + DVector::from_column_slice(c) - DVector::from_column_slice(x)
        + f_mat.transpose() * &lam
        - DVector::from_column_slice(&solution.mu)
        + DVector::from_column_slice(&solution.nu);
    let mut worst = stat.amax();
    let eq = f_mat * &yv - DVector::from_column_slice(d);
    worst = worst.max(eq.amax());
    for j in 0..solution.y.len() {
        worst = worst.max(-solution.mu[j]);
        worst = worst.max(-solution.nu[j]);
        match ell {
            Some(ell) => {
                worst = worst.max(ell[j] - solution.y[j]);
                worst = worst.max((solution.mu[j] * (solution.y[j] - ell[j])).abs());
            }
            None => worst = worst.max(solution.mu[j].abs()),
        }
        match u {
            Some(u) => {
                worst = worst.max(solution.y[j] - u[j]);
                worst = worst.max((solution.nu[j] * (u[j] - solution.y[j])).abs());
            }
            None => worst = worst.max(solution.nu[j].abs()),
        }
    }
    worst
}

/// Solve the general response problem with dense positive definite `R`,
/// full-row-rank `F`, and optional one-sided bounds, via the splitting
/// engine. Runs to a KKT residual of `tol.kkt`.
#[allow(clippy::too_many_arguments)]
pub fn solve_llp_general(
    r_mat: &DMatrix<f64>,
    f_mat: &DMatrix<f64>,
    c: &[f64],
    d: &[f64],
    ell: Option<&[f64]>,
    u: Option<&[f64]>,
    x: &[f64],
    tol: &Tolerances,
) -> Result<LlpSolution, LlpError> {
    let m = r_mat.nrows();
    let n = f_mat.nrows();
    if r_mat.ncols() != m || f_mat.ncols() != m || c.len() != m || x.len() != m || d.len() != n {
        return Err(LlpError::Dimension("R/F/c/d/x sizes disagree".into()));
    }
    if let Some(ell) = ell {
        if ell.len() != m {
            return Err(LlpError::Dimension("ell length mismatch".into()));
        }
    }
    if let Some(u) = u {
        if u.len() != m {
            return Err(LlpError::Dimension("u length mismatch".into()));
        }
    }
    let eigs = r_mat.clone().symmetric_eigen().eigenvalues;
    let lam_min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
    let lam_max = eigs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lam_min <= 0.0 {
        return Err(LlpError::NotPositiveDefinite);
    }

    let q_lin: Vec<f64> = c.iter().zip(x.iter()).map(|(ci, xi)| ci - xi).collect();
    let rows = n + m;
    let mut a = DMatrix::zeros(rows, m);
    a.view_mut((0, 0), (n, m)).copy_from(f_mat);
    for j in 0..m {
        a[(n + j, j)] = 1.0;
    }
    let mut lb = vec![f64::NEG_INFINITY; rows];
    let mut ub = vec![f64::INFINITY; rows];
    lb[..n].copy_from_slice(d);
    ub[..n].copy_from_slice(d);
    if let Some(ell) = ell {
        lb[n..].copy_from_slice(ell);
    }
    if let Some(u) = u {
        ub[n..].copy_from_slice(u);
    }

    let problem = QpProblem {
        p: r_mat,
        q: &q_lin,
        a: &a,
        lb: &lb,
        ub: &ub,
    };
    let settings = QpSettings {
        // Run a decade below the target: the combined KKT residual includes
        // complementarity products that can exceed the raw primal/dual pair.
        eps: tol.kkt * 0.1,
        max_iter: 100_000,
        // Step size from the extreme eigenvalues of R.
        rho: (lam_min * lam_max).sqrt().clamp(1e-3, 1e3),
        ..QpSettings::default()
    };
    let qp_sol = solve_box_qp(&problem, &settings);
    let extract = |sol: &crate::qp::QpSolution| -> LlpSolution {
        let lambda = sol.dual[..n].to_vec();
        let mut mu = vec![0.0; m];
        let mut nu = vec![0.0; m];
        for j in 0..m {
            let w = sol.dual[n + j];
            if w >= 0.0 {
                nu[j] = w;
            } else {
                mu[j] = -w;
            }
        }
        let mut out = LlpSolution {
            y: sol.x.clone(),
            lambda,
            mu,
            nu,
            kkt_residual: 0.0,
        };
        out.kkt_residual = kkt_residual_general(r_mat, f_mat, c, d, ell, u, x, &out);
        out
    };
    match qp_sol.status {
        QpStatus::Solved => {
            let solution = extract(&qp_sol);
            if solution.kkt_residual <= tol.kkt {
                Ok(solution)
            } else {
                Err(LlpError::MaxIterations {
                    residual: solution.kkt_residual,
                    solution: Box::new(solution),
                })
            }
        }
        QpStatus::MaxIterations => {
            let solution = extract(&qp_sol);
            Err(LlpError::MaxIterations {
                residual: solution.kkt_residual,
                solution: Box::new(solution),
            })
        }
        QpStatus::PrimalInfeasible | QpStatus::DualInfeasible => Err(LlpError::Infeasible),
    }
}

/// Response-problem objective `(1/2) y^T Q y + (c - x)^T y`.
pub fn llp_objective(instance: &MarketInstance, x: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for j in 0..instance.m() {
        total += 0.5 * instance.q()[j] * y[j] * y[j] + (instance.c()[j] - x[j]) * y[j];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{assemble, ProsumerProfile};
    use approx::assert_abs_diff_eq;

    fn fixture_a() -> MarketInstance {
        let profile = ProsumerProfile {
            q: vec![2.0, 2.0],
            h0: vec![1.0, 1.0],
            h_lb: vec![0.0, 0.0],
            h_ub: vec![4.0, 4.0],
            h_tot: 2.0,
            s: vec![1.0, 3.0],
        };
        assemble(vec![profile], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn fixture_a_interior_solutions() {
        let inst = fixture_a();
        let sol = solve_llp(&inst, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(sol.y[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.y[1], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.lambda[0], 0.0, epsilon = 1e-9);
        assert!(sol.mu.iter().chain(sol.nu.iter()).all(|&v| v.abs() < 1e-9));
        assert!(sol.kkt_residual <= 1e-10);

        let sol = solve_llp(&inst, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(sol.y[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.y[1], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.lambda[0], -1.0, epsilon = 1e-9);
        assert!(sol.kkt_residual <= 1e-10);
    }

    #[test]
    fn single_step_forced_by_equality() {
        let profile = ProsumerProfile {
            q: vec![1.0],
            h0: vec![1.0],
            h_lb: vec![0.0],
            h_ub: vec![2.0],
            h_tot: 1.0,
            s: vec![2.0],
        };
        let inst = assemble(vec![profile], &[1.0]).unwrap();
        // d = 1 - 2 = -1 so y must equal 1 regardless of x.
        for x in [-3.0, 0.0, 5.0] {
            let sol = solve_llp(&inst, &[x]).unwrap();
            assert_abs_diff_eq!(sol.y[0], 1.0, epsilon = 1e-10);
            assert!(sol.kkt_residual <= 1e-9, "residual {}", sol.kkt_residual);
        }
    }

    #[test]
    fn residual_detects_perturbations() {
        let inst = fixture_a();
        let x = [0.0, 0.0];
        let mut sol = solve_llp(&inst, &x).unwrap();
        assert!(kkt_residual(&inst, &x, &sol) <= 1e-10);
        sol.y[0] += 0.1;
        let q_min = inst.q().iter().copied().fold(f64::INFINITY, f64::min);
        assert!(kkt_residual(&inst, &x, &sol) >= 0.1 * q_min.min(1.0));
        let mut sol = solve_llp(&inst, &x).unwrap();
        sol.mu[0] = -1.0;
        assert!(kkt_residual(&inst, &x, &sol) >= 1.0);
    }

    #[test]
    fn clipped_coordinates_recover_duals() {
        // Large price on step 0 pushes y_0 to its upper bound.
        let inst = fixture_a();
        let x = [20.0, 0.0];
        let sol = solve_llp(&inst, &x).unwrap();
        assert_abs_diff_eq!(sol.y[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.y[1], 1.0, epsilon = 1e-9);
        assert!(sol.nu[0] > 1.0);
        assert!(sol.kkt_residual <= 1e-8, "residual {}", sol.kkt_residual);
    }

    #[test]
    fn general_matches_bisection_on_fixture_a() {
        let inst = fixture_a();
        let x = [1.0, 1.0];
        let exact = solve_llp(&inst, &x).unwrap();
        let r_mat = DMatrix::from_diagonal(&DVector::from_column_slice(inst.q()));
        let f_mat = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        let tol = Tolerances::default();
        let general = solve_llp_general(
            &r_mat,
            &f_mat,
            inst.c(),
            inst.d(),
            Some(inst.ell()),
            Some(inst.u()),
            &x,
            &tol,
        )
        .unwrap();
        for (a, b) in exact.y.iter().zip(general.y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        assert!(general.kkt_residual <= 1e-8);
    }

    #[test]
    fn general_handles_coupled_weights_lower_only() {
        let r_mat = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]);
        let f_mat = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        let tol = Tolerances::default();
        let sol = solve_llp_general(
            &r_mat,
            &f_mat,
            &[0.0, 0.0],
            &[0.0],
            Some(&[-1.0, -1.0]),
            None,
            &[0.0, 0.0],
            &tol,
        )
        .unwrap();
        assert_abs_diff_eq!(sol.y[0], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.y[1], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn general_with_point_feasible_set() {
        // ell = u pins y; any x must return that point.
        let r_mat = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let f_mat = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        let fixed = [0.5, 1.5];
        let d = [-2.0];
        let tol = Tolerances::default();
        for x in [[0.0, 0.0], [3.0, -1.0]] {
            let sol = solve_llp_general(
                &r_mat,
                &f_mat,
                &[1.0, -1.0],
                &d,
                Some(&fixed),
                Some(&fixed),
                &x,
                &tol,
            )
            .unwrap();
            assert_abs_diff_eq!(sol.y[0], 0.5, epsilon = 1e-7);
            assert_abs_diff_eq!(sol.y[1], 1.5, epsilon = 1e-7);
        }
    }

    #[test]
    fn infeasible_block_is_reported() {
        let profile = ProsumerProfile {
            q: vec![1.0, 1.0],
            h0: vec![1.0, 1.0],
            h_lb: vec![0.5, 0.5],
            h_ub: vec![2.0, 2.0],
            h_tot: 2.0,
            s: vec![0.0, 0.0],
        };
        // Craft an infeasible target by solving against a mode that drops
        // the side making it feasible: target -d = -2, while the lower-only
        // reachable range is [sum ell, inf) = [-4, inf) so this stays
        // feasible; instead check the assembled guard directly.
        let inst = assemble(vec![profile], &[1.0, 1.0]).unwrap();
        assert!(solve_llp(&inst, &[0.0, 0.0]).is_ok());
        // Upper-only mode keeps the block feasible too; feasibility errors
        // surface through the assemble guard (tested in market) and the
        // general solver below.
        let r_mat = DMatrix::identity(1, 1);
        let f_mat = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let tol = Tolerances::default();
        let err = solve_llp_general(
            &r_mat,
            &f_mat,
            &[0.0],
            &[5.0],
            Some(&[0.0]),
            Some(&[1.0]),
            &[0.0],
            &tol,
        )
        .unwrap_err();
        assert!(matches!(err, LlpError::Infeasible));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn random_instance(
            q: Vec<f64>,
            h0: Vec<f64>,
            s: Vec<f64>,
            spread: f64,
        ) -> MarketInstance {
            let k = q.len();
            let h_ub: Vec<f64> = h0
                .iter()
                .zip(s.iter())
                .map(|(&a, &b)| a.max(b) + spread)
                .collect();
            let profile = ProsumerProfile {
                q,
                h_lb: vec![0.0; k],
                h_ub,
                h_tot: h0.iter().sum(),
                h0,
                s,
            };
            assemble(vec![profile], &vec![1.0; k]).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn clipped_sum_is_monotone_in_dual(
                q in proptest::collection::vec(0.2..4.0f64, 4),
                c in proptest::collection::vec(-3.0..3.0f64, 4),
                x in proptest::collection::vec(-3.0..3.0f64, 4),
                lo in proptest::collection::vec(-2.0..0.0f64, 4),
                width in proptest::collection::vec(0.0..3.0f64, 4),
                lambdas in proptest::collection::vec(-10.0..10.0f64, 8),
            ) {
                let hi: Vec<f64> = lo.iter().zip(width.iter()).map(|(a, b)| a + b).collect();
                let eval = |lambda: f64| -> f64 {
                    (0..4)
                        .map(|j| ((x[j] - c[j] + lambda) / q[j]).max(lo[j]).min(hi[j]))
                        .sum()
                };
                let mut sorted = lambdas.clone();
                sorted.sort_by(f64::total_cmp);
                for pair in sorted.windows(2) {
                    prop_assert!(eval(pair[0]) <= eval(pair[1]) + 1e-12);
                }
            }

            #[test]
            fn bisection_agrees_with_splitting(
                q in proptest::collection::vec(0.3..3.0f64, 3),
                h0 in proptest::collection::vec(0.05..2.0f64, 3),
                s in proptest::collection::vec(0.0..2.0f64, 3),
                x in proptest::collection::vec(-2.0..2.0f64, 3),
            ) {
                let inst = random_instance(q, h0, s, 1.0);
                let exact = solve_llp(&inst, &x).unwrap();
                prop_assert!(exact.kkt_residual <= 1e-8);
                let r_mat = DMatrix::from_diagonal(&DVector::from_column_slice(inst.q()));
                let f_mat = DMatrix::from_row_slice(1, 3, &[-1.0, -1.0, -1.0]);
                let tol = Tolerances::default();
                let general = solve_llp_general(
                    &r_mat, &f_mat, inst.c(), inst.d(),
                    Some(inst.ell()), Some(inst.u()), &x, &tol,
                ).unwrap();
                for (a, b) in exact.y.iter().zip(general.y.iter()) {
                    prop_assert!((a - b).abs() <= 1e-7, "y mismatch {a} vs {b}");
                }
            }

            #[test]
            fn returned_point_beats_feasible_perturbations(
                q in proptest::collection::vec(0.3..3.0f64, 3),
                h0 in proptest::collection::vec(0.05..2.0f64, 3),
                s in proptest::collection::vec(0.0..2.0f64, 3),
                x in proptest::collection::vec(-2.0..2.0f64, 3),
                moves in proptest::collection::vec((0usize..3, 0usize..3, 0.0..1.0f64), 20),
            ) {
                let inst = random_instance(q, h0, s, 1.0);
                let sol = solve_llp(&inst, &x).unwrap();
                let base = llp_objective(&inst, &x, &sol.y);
                for (from, to, frac) in moves {
                    if from == to {
                        continue;
                    }
                    // Zero-sum shift keeps the equality; step bounded by the
                    // box slack on both coordinates.
                    let room = (sol.y[from] - inst.ell()[from])
                        .min(inst.u()[to] - sol.y[to])
                        .max(0.0);
                    let step = frac * room;
                    let mut y = sol.y.clone();
                    y[from] -= step;
                    y[to] += step;
                    let perturbed = llp_objective(&inst, &x, &y);
                    prop_assert!(perturbed >= base - 1e-9,
                        "perturbation improved objective: {perturbed} < {base}");
                }
            }
        }
    }
}
