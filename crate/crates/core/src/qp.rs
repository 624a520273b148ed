//! Dense operator-splitting solver for box-constrained quadratic programs
//!
//! ```text
//! minimize   (1/2) x^T P x + q^T x
//! subject to lb <= A x <= ub
//! ```
//!
//! with `P` symmetric positive semidefinite and per-row bounds that may be
//! infinite or coincide (equality rows). The iteration is the standard
//! splitting on the consensus form `Ax = z, z in [lb, ub]`:
//!
//! ```text
//! (P + sigma I + A^T R A) xt = sigma x - q + A^T (R z - y)
//! x  <- alpha xt + (1 - alpha) x
//! z+ <- clamp(alpha A xt + (1 - alpha) z + R^-1 y, lb, ub)
//! y  <- y + R (alpha A xt + (1 - alpha) z - z+)
//! ```
//!
//! where `R` is a per-row step-size diagonal (inflated on equality rows).
//! The linear system is factored once and refactored only when the
//! adaptive step-size rule changes `R`. Before returning, the solver
//! attempts an active-set polish: it solves the KKT system restricted to
//! the bounds detected active and accepts the result when the full KKT
//! residual beats the requested tolerance.
//!
//! Dual sign convention: stationarity is `P x + q + A^T y = 0` with
//! `y_i >= 0` when row `i` sits at its upper bound and `y_i <= 0` at the
//! lower bound.

use nalgebra::{DMatrix, DVector};

/// Problem data borrowed by the solver.
#[derive(Debug, Clone, Copy)]
pub struct QpProblem<'a> {
    pub p: &'a DMatrix<f64>,
    pub q: &'a [f64],
    pub a: &'a DMatrix<f64>,
    pub lb: &'a [f64],
    pub ub: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub sigma: f64,
    pub alpha: f64,
    /// Initial step size; adapted during the run unless `adaptive_rho` is off.
    pub rho: f64,
    /// Step-size inflation on rows with `lb == ub`.
    pub eq_rho_scale: f64,
    pub adaptive_rho: bool,
    /// Primal/dual residual target (absolute).
    pub eps: f64,
    pub max_iter: usize,
    pub check_interval: usize,
    pub polish: bool,
    /// Residual level at which polish attempts start.
    pub polish_trigger: f64,
    pub equilibrate: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            eq_rho_scale: 1e3,
            adaptive_rho: true,
            eps: 1e-8,
            max_iter: 200_000,
            check_interval: 25,
            polish: true,
            polish_trigger: 1e-5,
            equilibrate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    /// Projected row values `z ~ A x`.
    pub z: Vec<f64>,
    /// Row duals `y`.
    pub dual: Vec<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub polished: bool,
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
}

/// Ruiz-style equilibration of the stacked `[P; A]` columns and `A` rows.
fn equilibrate(p: &mut DMatrix<f64>, q: &mut DVector<f64>, a: &mut DMatrix<f64>) -> Scaling {
    let nv = p.nrows();
    let nr = a.nrows();
    let mut d_total = DVector::from_element(nv, 1.0);
    let mut e_total = DVector::from_element(nr, 1.0);
    for _ in 0..5 {
        let mut d = DVector::from_element(nv, 1.0);
        for j in 0..nv {
            let mut norm = 0.0_f64;
            for i in 0..nv {
                norm = norm.max(p[(i, j)].abs());
            }
            for i in 0..nr {
                norm = norm.max(a[(i, j)].abs());
            }
            if norm > 1e-12 {
                d[j] = 1.0 / norm.sqrt();
            }
        }
        let mut e = DVector::from_element(nr, 1.0);
        for i in 0..nr {
            let mut norm = 0.0_f64;
            for j in 0..nv {
                norm = norm.max(a[(i, j)].abs() * d[j]);
            }
            if norm > 1e-12 {
                e[i] = 1.0 / norm.sqrt();
            }
        }
        for i in 0..nv {
            for j in 0..nv {
                p[(i, j)] *= d[i] * d[j];
            }
        }
        for j in 0..nv {
            q[j] *= d[j];
        }
        for i in 0..nr {
            for j in 0..nv {
                a[(i, j)] *= e[i] * d[j];
            }
        }
        d_total.component_mul_assign(&d);
        e_total.component_mul_assign(&e);
    }
    Scaling { d: d_total, e: e_total }
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Full KKT error of a candidate `(x, y)`: stationarity, box violation of
/// `Ax`, and complementarity (which also penalizes wrong dual signs).
pub fn kkt_error(problem: &QpProblem, x: &[f64], y: &[f64]) -> f64 {
    let xv = DVector::from_column_slice(x);
    let yv = DVector::from_column_slice(y);
    let stat = problem.p * &xv + DVector::from_column_slice(problem.q) + problem.a.transpose() * &yv;
    let mut worst = stat.amax();
    let ax = problem.a * &xv;
    for i in 0..ax.len() {
        let v = ax[i];
        if problem.lb[i].is_finite() {
            worst = worst.max(problem.lb[i] - v);
        }
        if problem.ub[i].is_finite() {
            worst = worst.max(v - problem.ub[i]);
        }
        // Complementarity: positive dual pairs with the upper bound,
        // negative with the lower.
        if y[i] > 0.0 {
            if problem.ub[i].is_finite() {
                worst = worst.max(y[i].min(1.0) * (problem.ub[i] - v).abs());
            } else {
                worst = worst.max(y[i]);
            }
        } else if y[i] < 0.0 {
            if problem.lb[i].is_finite() {
                worst = worst.max((-y[i]).min(1.0) * (v - problem.lb[i]).abs());
            } else {
                worst = worst.max(-y[i]);
            }
        }
    }
    worst
}

/// Active-set polish: solve the KKT system restricted to the detected
/// active rows with light regularization and one refinement pass.
fn polish(
    problem: &QpProblem,
    y: &[f64],
    z: &[f64],
    eps: f64,
) -> Option<(Vec<f64>, Vec<f64>, f64, f64)> {
    let nv = problem.p.nrows();
    let nr = problem.a.nrows();
    let mut active = Vec::new();
    let mut targets = Vec::new();
    for i in 0..nr {
        let equality = problem.lb[i].is_finite()
            && problem.ub[i].is_finite()
            && problem.ub[i] - problem.lb[i] <= f64::EPSILON * (1.0 + problem.ub[i].abs());
        let span = if problem.lb[i].is_finite() && problem.ub[i].is_finite() {
            problem.ub[i] - problem.lb[i]
        } else {
            f64::INFINITY
        };
        let near = |bound: f64| (z[i] - bound).abs() <= 1e-6 * (1.0 + bound.abs()) && span > 0.0;
        let lower_active =
            y[i] < 0.0 && problem.lb[i].is_finite() || near(problem.lb[i]) && y[i] <= 0.0;
        let upper_active =
            y[i] > 0.0 && problem.ub[i].is_finite() || near(problem.ub[i]) && y[i] >= 0.0;
        if equality || lower_active {
            active.push(i);
            targets.push(problem.lb[i]);
        } else if upper_active {
            active.push(i);
            targets.push(problem.ub[i]);
        }
    }
    let na = active.len();
    let dim = nv + na;
    let delta = 1e-9;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(problem.p);
    for i in 0..nv {
        kkt[(i, i)] += delta;
    }
    for (slot, &row) in active.iter().enumerate() {
        for j in 0..nv {
            kkt[(nv + slot, j)] = problem.a[(row, j)];
            kkt[(j, nv + slot)] = problem.a[(row, j)];
        }
        kkt[(nv + slot, nv + slot)] = -delta;
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..nv {
        rhs[j] = -problem.q[j];
    }
    for (slot, &target) in targets.iter().enumerate() {
        rhs[nv + slot] = target;
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // One step of iterative refinement against the regularized system.
    let resid = &rhs - &kkt * &sol;
    if let Some(corr) = lu.solve(&resid) {
        sol += corr;
    }
    let x: Vec<f64> = sol.as_slice()[..nv].to_vec();
    let mut dual = vec![0.0; nr];
    for (slot, &row) in active.iter().enumerate() {
        dual[row] = sol[nv + slot];
    }
    let err = kkt_error(problem, &x, &dual);
    if err <= eps {
        let xv = DVector::from_column_slice(&x);
        let ax = problem.a * &xv;
        let mut prim = 0.0_f64;
        for i in 0..nr {
            let v = ax[i];
            if problem.lb[i].is_finite() {
                prim = prim.max(problem.lb[i] - v);
            }
            if problem.ub[i].is_finite() {
                prim = prim.max(v - problem.ub[i]);
            }
        }
        let stat = problem.p * &xv
            + DVector::from_column_slice(problem.q)
            + problem.a.transpose() * DVector::from_column_slice(&dual);
        Some((x, dual, prim.max(0.0), stat.amax()))
    } else {
        None
    }
}

/// Solve the box QP. The returned status distinguishes convergence,
/// iteration exhaustion, and primal/dual infeasibility certificates.
pub fn solve_box_qp(problem: &QpProblem, settings: &QpSettings) -> QpSolution {
    let nv = problem.p.nrows();
    let nr = problem.a.nrows();
    assert_eq!(problem.q.len(), nv);
    assert_eq!(problem.a.ncols(), nv);
    assert_eq!(problem.lb.len(), nr);
    assert_eq!(problem.ub.len(), nr);

    for i in 0..nr {
        if problem.lb[i] > problem.ub[i] {
            return QpSolution {
                status: QpStatus::PrimalInfeasible,
                x: vec![0.0; nv],
                z: vec![0.0; nr],
                dual: vec![0.0; nr],
                primal_residual: f64::INFINITY,
                dual_residual: f64::INFINITY,
                iterations: 0,
                polished: false,
            };
        }
    }

    // Scaled working copies.
    let mut p = problem.p.clone();
    let mut q = DVector::from_column_slice(problem.q);
    let mut a = problem.a.clone();
    let scaling = if settings.equilibrate && nv > 0 {
        equilibrate(&mut p, &mut q, &mut a)
    } else {
        Scaling {
            d: DVector::from_element(nv, 1.0),
            e: DVector::from_element(nr, 1.0),
        }
    };
    let lb: Vec<f64> = (0..nr).map(|i| problem.lb[i] * scaling.e[i]).collect();
    let ub: Vec<f64> = (0..nr).map(|i| problem.ub[i] * scaling.e[i]).collect();
    let equality: Vec<bool> = (0..nr)
        .map(|i| {
            problem.lb[i].is_finite()
                && problem.ub[i].is_finite()
                && problem.ub[i] - problem.lb[i] <= f64::EPSILON * (1.0 + problem.ub[i].abs())
        })
        .collect();

    let mut rho_base = settings.rho;
    let rho_vec = |base: f64, equality: &[bool]| -> DVector<f64> {
        DVector::from_iterator(
            equality.len(),
            equality
                .iter()
                .map(|&eq| if eq { base * settings.eq_rho_scale } else { base }),
        )
    };
    let mut rho = rho_vec(rho_base, &equality);

    let factor = |p: &DMatrix<f64>, a: &DMatrix<f64>, rho: &DVector<f64>| {
        let mut scaled_a = a.clone();
        for i in 0..scaled_a.nrows() {
            for j in 0..scaled_a.ncols() {
                scaled_a[(i, j)] *= rho[i];
            }
        }
        let mut kkt = p.clone() + a.transpose() * scaled_a;
        for i in 0..kkt.nrows() {
            kkt[(i, i)] += settings.sigma;
        }
        kkt.cholesky().expect("P + sigma I + A^T R A is positive definite")
    };
    let mut chol = factor(&p, &a, &rho);

    let mut x = DVector::zeros(nv);
    let mut z = {
        let ax = &a * &x;
        DVector::from_iterator(nr, (0..nr).map(|i| clamp(ax[i], lb[i], ub[i])))
    };
    let mut y = DVector::zeros(nr);
    let mut prev_x = x.clone();
    let mut prev_y = y.clone();

    let unscale_x = |x: &DVector<f64>| -> Vec<f64> {
        (0..nv).map(|j| x[j] * scaling.d[j]).collect()
    };
    let unscale_y = |y: &DVector<f64>| -> Vec<f64> {
        (0..nr).map(|i| y[i] * scaling.e[i]).collect()
    };
    let unscale_z = |z: &DVector<f64>| -> Vec<f64> {
        (0..nr).map(|i| z[i] / scaling.e[i]).collect()
    };

    let mut status = QpStatus::MaxIterations;
    let mut iterations = settings.max_iter;
    // Best iterate seen, kept as one coherent snapshot.
    let mut best_score = f64::INFINITY;
    let mut best_prim = f64::INFINITY;
    let mut best_dual = f64::INFINITY;
    let mut result_x = unscale_x(&x);
    let mut result_y = unscale_y(&y);
    let mut result_z = unscale_z(&z);

    for iter in 1..=settings.max_iter {
        // xt solve and relaxed updates.
        let rhs = &x * settings.sigma - &q
            + a.transpose() * DVector::from_iterator(nr, (0..nr).map(|i| rho[i] * z[i] - y[i]));
        let xt = chol.solve(&rhs);
        let zt = &a * &xt;
        x = &xt * settings.alpha + &x * (1.0 - settings.alpha);
        let mut z_new = DVector::zeros(nr);
        for i in 0..nr {
            let relax = settings.alpha * zt[i] + (1.0 - settings.alpha) * z[i];
            z_new[i] = clamp(relax + y[i] / rho[i], lb[i], ub[i]);
            y[i] += rho[i] * (relax - z_new[i]);
        }
        z = z_new;

        if iter % settings.check_interval != 0 && iter != settings.max_iter {
            continue;
        }

        let xu = unscale_x(&x);
        let yu = unscale_y(&y);
        let zu = unscale_z(&z);
        let xv = DVector::from_column_slice(&xu);
        let yv = DVector::from_column_slice(&yu);
        let ax = problem.a * &xv;
        let mut prim = 0.0_f64;
        for i in 0..nr {
            prim = prim.max((ax[i] - zu[i]).abs());
        }
        let stat = problem.p * &xv + DVector::from_column_slice(problem.q)
            + problem.a.transpose() * &yv;
        let dual_res = stat.amax();

        if prim.max(dual_res) < best_score {
            best_score = prim.max(dual_res);
            best_prim = prim;
            best_dual = dual_res;
            result_x = xu.clone();
            result_y = yu.clone();
            result_z = zu.clone();
        }

        let converged = prim <= settings.eps && dual_res <= settings.eps;
        let try_polish = settings.polish
            && (converged || (prim <= settings.polish_trigger && dual_res <= settings.polish_trigger));
        if try_polish {
            if let Some((px, py, pprim, pdual)) = polish(problem, &yu, &zu, settings.eps) {
                let pz: Vec<f64> = {
                    let ax = problem.a * DVector::from_column_slice(&px);
                    (0..nr)
                        .map(|i| clamp(ax[i], problem.lb[i], problem.ub[i]))
                        .collect()
                };
                return QpSolution {
                    status: QpStatus::Solved,
                    x: px,
                    z: pz,
                    dual: py,
                    primal_residual: pprim,
                    dual_residual: pdual,
                    iterations: iter,
                    polished: true,
                };
            }
        }
        if converged {
            status = QpStatus::Solved;
            iterations = iter;
            result_x = xu;
            result_y = yu;
            result_z = zu;
            best_prim = prim;
            best_dual = dual_res;
            break;
        }

        // Infeasibility certificates from iterate differences.
        let dx: Vec<f64> = (0..nv).map(|j| (x[j] - prev_x[j]) * scaling.d[j]).collect();
        let dy: Vec<f64> = (0..nr).map(|i| (y[i] - prev_y[i]) * scaling.e[i]).collect();
        prev_x = x.clone();
        prev_y = y.clone();
        let dy_norm = inf_norm(&dy);
        if dy_norm > 1e-13 {
            let at_dy = problem.a.transpose() * DVector::from_column_slice(&dy);
            let mut support = 0.0;
            let mut usable = true;
            for i in 0..nr {
                if dy[i] > 0.0 {
                    if problem.ub[i].is_finite() {
                        support += problem.ub[i] * dy[i];
                    } else {
                        usable = false;
                    }
                } else if dy[i] < 0.0 {
                    if problem.lb[i].is_finite() {
                        support += problem.lb[i] * dy[i];
                    } else {
                        usable = false;
                    }
                }
            }
            if usable
                && at_dy.amax() <= 1e-9 * dy_norm
                && support <= -1e-9 * dy_norm
            {
                status = QpStatus::PrimalInfeasible;
                iterations = iter;
                break;
            }
        }
        let dx_norm = inf_norm(&dx);
        if dx_norm > 1e-13 {
            let dxv = DVector::from_column_slice(&dx);
            let p_dx = problem.p * &dxv;
            let a_dx = problem.a * &dxv;
            let q_dx: f64 = problem.q.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
            let mut recession_ok = true;
            for i in 0..nr {
                if problem.ub[i].is_finite() && a_dx[i] > 1e-9 * dx_norm {
                    recession_ok = false;
                }
                if problem.lb[i].is_finite() && a_dx[i] < -1e-9 * dx_norm {
                    recession_ok = false;
                }
            }
            if recession_ok && p_dx.amax() <= 1e-9 * dx_norm && q_dx <= -1e-9 * dx_norm {
                status = QpStatus::DualInfeasible;
                iterations = iter;
                break;
            }
        }

        // Step-size adaptation.
        if settings.adaptive_rho {
            let ax_norm = ax.amax().max(inf_norm(&zu));
            let dual_scale = {
                let px = (problem.p * &xv).amax();
                let aty = (problem.a.transpose() * &yv).amax();
                px.max(aty).max(inf_norm(problem.q))
            };
            let prim_rel = prim / ax_norm.max(1e-10);
            let dual_rel = dual_res / dual_scale.max(1e-10);
            if prim_rel > 1e-14 && dual_rel > 1e-14 {
                let ratio = (prim_rel / dual_rel).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    rho_base = (rho_base * ratio).clamp(1e-6, 1e6);
                    rho = rho_vec(rho_base, &equality);
                    chol = factor(&p, &a, &rho);
                }
            }
        }
    }

    QpSolution {
        status,
        x: result_x,
        z: result_z,
        dual: result_y,
        primal_residual: best_prim,
        dual_residual: best_dual,
        iterations,
        polished: false,
    }
}
