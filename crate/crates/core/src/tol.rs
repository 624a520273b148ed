//! Central tolerance configuration. Every numeric threshold used across the
//! crate lives here so the defaults are visible in one place.

/// Numeric tolerances shared by all modules.
///
/// All values are absolute unless the field name says otherwise.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Symmetry gate: `|M - M^T|_inf` must stay below this before a matrix
    /// is treated as symmetric.
    pub symmetry: f64,
    /// PSD certificate: smallest eigenvalue may be as low as `-psd_eigenvalue`.
    pub psd_eigenvalue: f64,
    /// M-matrix certificate: largest off-diagonal entry allowed.
    pub mmatrix_offdiag: f64,
    /// Reduction identities `M F^T = 0` and `F r = d`.
    pub annihilation: f64,
    /// Margin used when certifying the strict inequality `u > r`.
    pub strict_margin: f64,
    /// Slack for the sign hypotheses `ell <= 0` and `u >= 0`.
    pub hypothesis_slack: f64,
    /// Relative slack for the total-demand assumption `sum h0 = h_tot`.
    pub assumption: f64,
    /// Gate on `|Ey - d|_inf` before demand reconstruction.
    pub demand_equality: f64,
    /// Target KKT residual for lower-level solutions.
    pub kkt: f64,
    /// Relative width at which the equality-dual bisection stops.
    pub bisection_width: f64,
    /// Equality residual at which the bisection stops.
    pub bisection_equality: f64,
    /// Primal/dual residual target for the splitting QP engine.
    pub qp_residual: f64,
    /// Response mismatch allowed by the bilevel certifier.
    pub certify_response: f64,
    /// Objective mismatch allowed by the bilevel certifier.
    pub certify_phi: f64,
    /// Relative objective gap for oracle-vs-convex comparisons.
    pub value_gap: f64,
    /// Condition-number cap on `F R^-1 F^T` before the reduction refuses.
    pub condition_cap: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            symmetry: 1e-12,
            psd_eigenvalue: 1e-10,
            mmatrix_offdiag: 1e-12,
            annihilation: 1e-10,
            strict_margin: 1e-9,
            hypothesis_slack: 1e-9,
            assumption: 1e-9,
            demand_equality: 1e-6,
            kkt: 1e-8,
            bisection_width: 1e-12,
            bisection_equality: 1e-10,
            qp_residual: 1e-8,
            certify_response: 1e-6,
            certify_phi: 1e-8,
            value_gap: 1e-3,
            condition_cap: 1e12,
        }
    }
}

impl Tolerances {
    /// Override the solver residual targets (`kkt` and `qp_residual`) in one go.
    pub fn with_solver_tolerance(mut self, tol: f64) -> Self {
        self.kkt = tol;
        self.qp_residual = tol;
        self
    }
}
