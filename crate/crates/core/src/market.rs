//! Market model: prosumer profiles, instance assembly, validation, and the
//! instance JSON format.
//!
//! Assembly performs the demand-variable elimination and vectorization that
//! turn per-prosumer preferences into the lower-level QP data
//! `(Q, c, ell, u, E, d, p)`. The aggregation matrix `E` has one row per
//! prosumer summing (and negating) that prosumer's net exchange; it is never
//! densified — every use reduces to a per-block sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reduction::ReducedModel;
use crate::tol::Tolerances;

/// Errors raised while building or using market instances.
#[derive(Debug, Error)]
pub enum MarketError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid profile for prosumer {prosumer}: field {field}: {detail}")]
    InvalidProfile {
        prosumer: usize,
        field: &'static str,
        detail: String,
    },
    #[error("prosumer {prosumer} block infeasible: sum ell = {lo} <= -d = {target} <= sum u = {hi} violated")]
    InfeasibleBlock {
        prosumer: usize,
        lo: f64,
        target: f64,
        hi: f64,
    },
    #[error("grid prices invalid: {detail}")]
    InvalidPrices { detail: String },
    #[error("equality constraint violated: |Ey - d|_inf = {residual} > {tolerance}")]
    EqualityViolated { residual: f64, tolerance: f64 },
    #[error("instance file malformed: {0}")]
    Malformed(String),
}

/// One prosumer's preferences, bounds, generation, and dissatisfaction
/// weights over the `K`-step horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProsumerProfile {
    /// Dissatisfaction weights, one positive value per time-step.
    pub q: Vec<f64>,
    /// Preferred demand per step.
    pub h0: Vec<f64>,
    /// Demand lower bound per step.
    pub h_lb: Vec<f64>,
    /// Demand upper bound per step.
    pub h_ub: Vec<f64>,
    /// Total demand over the horizon.
    pub h_tot: f64,
    /// Renewable generation per step.
    pub s: Vec<f64>,
}

impl ProsumerProfile {
    /// Horizon length of the profile.
    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    /// Check all profile invariants, returning the first violation.
    pub fn check(&self, index: usize, tol: &Tolerances) -> Result<(), MarketError> {
        let k = self.q.len();
        if k == 0 {
            return Err(MarketError::InvalidProfile {
                prosumer: index,
                field: "q",
                detail: "horizon must have at least one step".into(),
            });
        }
        for (name, v) in [
            ("h0", &self.h0),
            ("h_lb", &self.h_lb),
            ("h_ub", &self.h_ub),
            ("s", &self.s),
        ] {
            if v.len() != k {
                return Err(MarketError::DimensionMismatch {
                    what: format!("prosumer {index} field {name}"),
                    expected: k,
                    found: v.len(),
                });
            }
        }
        let finite = |name: &'static str, v: &[f64]| -> Result<(), MarketError> {
            match v.iter().position(|x| !x.is_finite()) {
                Some(at) => Err(MarketError::InvalidProfile {
                    prosumer: index,
                    field: name,
                    detail: format!("non-finite value at step {at}"),
                }),
                None => Ok(()),
            }
        };
        finite("q", &self.q)?;
        finite("h0", &self.h0)?;
        finite("h_lb", &self.h_lb)?;
        finite("h_ub", &self.h_ub)?;
        finite("s", &self.s)?;
        if !self.h_tot.is_finite() {
            return Err(MarketError::InvalidProfile {
                prosumer: index,
                field: "h_tot",
                detail: "non-finite value".into(),
            });
        }
        for step in 0..k {
            if self.q[step] <= 0.0 {
                return Err(MarketError::InvalidProfile {
                    prosumer: index,
                    field: "q",
                    detail: format!("q({step}) = {} must be positive", self.q[step]),
                });
            }
            if self.s[step] < 0.0 {
                return Err(MarketError::InvalidProfile {
                    prosumer: index,
                    field: "s",
                    detail: format!("s({step}) = {} must be nonnegative", self.s[step]),
                });
            }
            if self.h_lb[step] < 0.0 {
                return Err(MarketError::InvalidProfile {
                    prosumer: index,
                    field: "h_lb",
                    detail: format!("h_lb({step}) = {} must be nonnegative", self.h_lb[step]),
                });
            }
            if self.h_lb[step] > self.h_ub[step] {
                return Err(MarketError::InvalidProfile {
                    prosumer: index,
                    field: "h_ub",
                    detail: format!(
                        "h_lb({step}) = {} exceeds h_ub({step}) = {}",
                        self.h_lb[step], self.h_ub[step]
                    ),
                });
            }
            if self.h0[step] < self.h_lb[step] || self.h0[step] > self.h_ub[step] {
                return Err(MarketError::InvalidProfile {
                    prosumer: index,
                    field: "h0",
                    detail: format!(
                        "h0({step}) = {} outside [{}, {}]",
                        self.h0[step], self.h_lb[step], self.h_ub[step]
                    ),
                });
            }
        }
        let h0_sum: f64 = self.h0.iter().sum();
        if (h0_sum - self.h_tot).abs() > tol.assumption * (1.0 + self.h_tot.abs()) {
            return Err(MarketError::InvalidProfile {
                prosumer: index,
                field: "h_tot",
                detail: format!(
                    "total-demand assumption violated: sum h0 = {h0_sum} != h_tot = {}",
                    self.h_tot
                ),
            });
        }
        let lb_sum: f64 = self.h_lb.iter().sum();
        let ub_sum: f64 = self.h_ub.iter().sum();
        if self.h_tot < lb_sum - tol.assumption * (1.0 + lb_sum.abs())
            || self.h_tot > ub_sum + tol.assumption * (1.0 + ub_sum.abs())
        {
            return Err(MarketError::InvalidProfile {
                prosumer: index,
                field: "h_tot",
                detail: format!("h_tot = {} outside [sum h_lb, sum h_ub] = [{lb_sum}, {ub_sum}]", self.h_tot),
            });
        }
        Ok(())
    }
}

/// Assembled vector-form market instance for `n` prosumers over `K` steps
/// (`m = n * K` coupled variables).
///
/// The per-prosumer layout is prosumer-major: coordinate `i * K + k` is
/// prosumer `i` at step `k`. The aggregation matrix is kept implicit: row
/// `i` of `E` is `-1` on block `i` and `0` elsewhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketInstance {
    n: usize,
    k: usize,
    /// Diagonal of `Q` (positive weights), length `m`.
    q: Vec<f64>,
    /// Linear cost `c = Q (h0 - s)`, length `m`.
    c: Vec<f64>,
    /// Lower bounds `ell = s - h_ub`, length `m`.
    ell: Vec<f64>,
    /// Upper bounds `u = s - h_lb`, length `m`.
    u: Vec<f64>,
    /// Per-prosumer equality targets `d_i = h_tot_i - sum_k s_i(k)`, length `n`.
    d: Vec<f64>,
    /// Grid price replicated per prosumer, length `m`.
    p: Vec<f64>,
    /// Grid price per step, length `K`.
    grid_prices: Vec<f64>,
    /// Source profiles (retained for validation, reconstruction, and serialization).
    profiles: Vec<ProsumerProfile>,
}

impl MarketInstance {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.k
    }

    /// Total variable count `m = n * K`.
    pub fn m(&self) -> usize {
        self.n * self.k
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn grid_prices(&self) -> &[f64] {
        &self.grid_prices
    }

    pub fn profiles(&self) -> &[ProsumerProfile] {
        &self.profiles
    }

    /// Flattened generation vector `s`, length `m`.
    pub fn s(&self) -> Vec<f64> {
        self.profiles.iter().flat_map(|p| p.s.iter().copied()).collect()
    }

    /// Index range of prosumer `i`'s block.
    pub fn block(&self, i: usize) -> std::ops::Range<usize> {
        i * self.k..(i + 1) * self.k
    }

    /// Apply the aggregation matrix: `(Ey)_i = -sum_k y_i(k)`.
    pub fn apply_equality(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.m());
        (0..self.n)
            .map(|i| -y[self.block(i)].iter().sum::<f64>())
            .collect()
    }

    /// Serialize to the instance JSON format.
    pub fn to_json(&self) -> String {
        let file = InstanceFile {
            k: self.k,
            grid_prices: self.grid_prices.clone(),
            prosumers: self.profiles.clone(),
        };
        serde_json::to_string_pretty(&file).expect("instance serialization cannot fail")
    }

    /// Parse and assemble an instance from the JSON format.
    pub fn from_json(text: &str) -> Result<Self, MarketError> {
        let file: InstanceFile =
            serde_json::from_str(text).map_err(|e| MarketError::Malformed(e.to_string()))?;
        if file.grid_prices.len() != file.k {
            return Err(MarketError::DimensionMismatch {
                what: "grid_prices".into(),
                expected: file.k,
                found: file.grid_prices.len(),
            });
        }
        for (i, profile) in file.prosumers.iter().enumerate() {
            if profile.horizon() != file.k {
                return Err(MarketError::DimensionMismatch {
                    what: format!("prosumer {i} horizon"),
                    expected: file.k,
                    found: profile.horizon(),
                });
            }
        }
        assemble(file.prosumers, &file.grid_prices)
    }
}

/// On-disk instance format.
#[derive(Debug, Serialize, Deserialize)]
struct InstanceFile {
    #[serde(rename = "K")]
    k: usize,
    grid_prices: Vec<f64>,
    prosumers: Vec<ProsumerProfile>,
}

/// Build a [`MarketInstance`] from profiles and per-step grid prices.
///
/// Performs the elimination `h = s - y` and the vectorization
/// `c = Q(h0 - s)`, `ell = s - h_ub`, `u = s - h_lb`,
/// `d_i = h_tot_i - sum_k s_i(k)`, with the grid price replicated across
/// prosumers.
pub fn assemble(
    profiles: Vec<ProsumerProfile>,
    grid_prices: &[f64],
) -> Result<MarketInstance, MarketError> {
    let tol = Tolerances::default();
    if profiles.is_empty() {
        return Err(MarketError::Malformed("no prosumers".into()));
    }
    let k = profiles[0].horizon();
    for (i, profile) in profiles.iter().enumerate() {
        if profile.horizon() != k {
            return Err(MarketError::DimensionMismatch {
                what: format!("prosumer {i} horizon"),
                expected: k,
                found: profile.horizon(),
            });
        }
        profile.check(i, &tol)?;
    }
    if grid_prices.len() != k {
        return Err(MarketError::DimensionMismatch {
            what: "grid_prices".into(),
            expected: k,
            found: grid_prices.len(),
        });
    }
    if let Some(at) = grid_prices.iter().position(|x| !x.is_finite()) {
        return Err(MarketError::InvalidPrices {
            detail: format!("non-finite price at step {at}"),
        });
    }

    let n = profiles.len();
    let m = n * k;
    let mut q = Vec::with_capacity(m);
    let mut c = Vec::with_capacity(m);
    let mut ell = Vec::with_capacity(m);
    let mut u = Vec::with_capacity(m);
    let mut d = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(m);
    for (i, profile) in profiles.iter().enumerate() {
        let s_sum: f64 = profile.s.iter().sum();
        let di = profile.h_tot - s_sum;
        for step in 0..k {
            q.push(profile.q[step]);
            c.push(profile.q[step] * (profile.h0[step] - profile.s[step]));
            ell.push(profile.s[step] - profile.h_ub[step]);
            u.push(profile.s[step] - profile.h_lb[step]);
            p.push(grid_prices[step]);
        }
        // LLP feasibility of the block: sum ell <= -d_i <= sum u.
        let lo: f64 = ell[i * k..(i + 1) * k].iter().sum();
        let hi: f64 = u[i * k..(i + 1) * k].iter().sum();
        let target = -di;
        let slack = tol.assumption * (1.0 + target.abs());
        if target < lo - slack || target > hi + slack {
            return Err(MarketError::InfeasibleBlock {
                prosumer: i,
                lo,
                target,
                hi,
            });
        }
        d.push(di);
    }

    Ok(MarketInstance {
        n,
        k,
        q,
        c,
        ell,
        u,
        d,
        p,
        grid_prices: grid_prices.to_vec(),
        profiles,
    })
}

/// Outcome of a single validation check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub passed: bool,
    /// Flattened coordinates (prosumer-major) that violate the check.
    pub offending: Vec<usize>,
    /// Worst slack observed; nonnegative slack means the check holds there.
    pub margin: f64,
}

impl CheckResult {
    fn from_slacks(slacks: impl Iterator<Item = f64>) -> Self {
        let mut offending = Vec::new();
        let mut margin = f64::INFINITY;
        for (idx, slack) in slacks.enumerate() {
            if slack < margin {
                margin = slack;
            }
            if slack < 0.0 {
                offending.push(idx);
            }
        }
        if margin == f64::INFINITY {
            margin = 0.0;
        }
        CheckResult {
            passed: offending.is_empty(),
            offending,
            margin,
        }
    }
}

/// Per-check report produced by [`validate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Profile invariants (weights, bounds, preferred values, totals).
    pub profile_invariants: CheckResult,
    /// Total-demand assumption `sum_k h0 = h_tot` per prosumer.
    pub assumption_total_demand: CheckResult,
    /// Block feasibility `sum ell <= -d_i <= sum u`.
    pub llp_feasible: CheckResult,
    /// Hypothesis `ell <= 0`.
    pub ell_nonpositive: CheckResult,
    /// Hypothesis `u >= 0`.
    pub u_nonnegative: CheckResult,
    /// Strict hypothesis `u > r` (via the reduced model when supplied,
    /// otherwise the equivalent `h0 > h_lb`).
    pub u_above_r: CheckResult,
}

impl ValidationReport {
    /// Every check passed.
    pub fn all_passed(&self) -> bool {
        self.profile_invariants.passed
            && self.assumption_total_demand.passed
            && self.llp_feasible.passed
            && self.hypotheses_passed()
    }

    /// The response-map hypotheses only: `ell <= 0`, `u >= 0`, `u > r`.
    pub fn hypotheses_passed(&self) -> bool {
        self.ell_nonpositive.passed && self.u_nonnegative.passed && self.u_above_r.passed
    }

    /// Hypotheses required by one-sided bound handling:
    /// lower-only needs `ell <= 0`; upper-only needs `u >= 0` and `u > r`
    /// on top of the M-matrix certificate checked elsewhere.
    pub fn hypotheses_passed_for(&self, lower_only: bool, upper_only: bool) -> bool {
        match (lower_only, upper_only) {
            (true, false) => self.ell_nonpositive.passed,
            (false, true) => self.u_nonnegative.passed && self.u_above_r.passed,
            _ => self.hypotheses_passed(),
        }
    }
}

/// Validate an instance against the model invariants and the response-map
/// hypotheses. Failures are report entries, never errors.
pub fn validate(
    instance: &MarketInstance,
    reduced: Option<&ReducedModel>,
    tol: &Tolerances,
) -> ValidationReport {
    let profile_invariants = CheckResult::from_slacks(instance.profiles.iter().enumerate().map(
        |(i, profile)| match profile.check(i, tol) {
            Ok(()) => 0.0,
            Err(_) => -1.0,
        },
    ));
    let assumption_total_demand =
        CheckResult::from_slacks(instance.profiles.iter().map(|profile| {
            let h0_sum: f64 = profile.h0.iter().sum();
            let err = (h0_sum - profile.h_tot).abs();
            tol.assumption * (1.0 + profile.h_tot.abs()) - err
        }));
    let llp_feasible = CheckResult::from_slacks((0..instance.n).map(|i| {
        let lo: f64 = instance.ell[instance.block(i)].iter().sum();
        let hi: f64 = instance.u[instance.block(i)].iter().sum();
        let target = -instance.d[i];
        let slack = tol.assumption * (1.0 + target.abs());
        (target - lo + slack).min(hi - target + slack)
    }));
    let ell_nonpositive = CheckResult::from_slacks(
        instance
            .ell
            .iter()
            .map(|&l| tol.hypothesis_slack - l),
    );
    let u_nonnegative = CheckResult::from_slacks(
        instance
            .u
            .iter()
            .map(|&ub| ub + tol.hypothesis_slack),
    );
    let u_above_r = match reduced {
        Some(model) => CheckResult::from_slacks(
            instance
                .u
                .iter()
                .zip(model.r.iter())
                .map(|(&ub, &ri)| ub - ri - tol.strict_margin),
        ),
        // Under the total-demand assumption the structured reduction gives
        // u - r = h0 - h_lb exactly, so check the profile data directly.
        None => CheckResult::from_slacks(instance.profiles.iter().flat_map(|profile| {
            profile
                .h0
                .iter()
                .zip(profile.h_lb.iter())
                .map(|(&h0, &lb)| h0 - lb - tol.strict_margin)
                .collect::<Vec<_>>()
        })),
    };
    ValidationReport {
        profile_invariants,
        assumption_total_demand,
        llp_feasible,
        ell_nonpositive,
        u_nonnegative,
        u_above_r,
    }
}

/// Recover per-step demand `h = s - y` from a net-exchange vector that
/// satisfies the per-prosumer equality constraint.
pub fn reconstruct_demand(
    instance: &MarketInstance,
    y: &[f64],
    tol: &Tolerances,
) -> Result<Vec<f64>, MarketError> {
    if y.len() != instance.m() {
        return Err(MarketError::DimensionMismatch {
            what: "y".into(),
            expected: instance.m(),
            found: y.len(),
        });
    }
    let ey = instance.apply_equality(y);
    let residual = ey
        .iter()
        .zip(instance.d.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    if residual > tol.demand_equality {
        return Err(MarketError::EqualityViolated {
            residual,
            tolerance: tol.demand_equality,
        });
    }
    let s = instance.s();
    Ok(s.iter().zip(y.iter()).map(|(si, yi)| si - yi).collect())
}

/// Split net exchange into nonnegative sold/bought parts with disjoint
/// supports: `y = y_plus - y_minus`.
pub fn split_net_exchange(y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let y_plus: Vec<f64> = y.iter().map(|&v| v.max(0.0)).collect();
    let y_minus: Vec<f64> = y.iter().map(|&v| (-v).max(0.0)).collect();
    (y_plus, y_minus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduction::reduce_instance;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    /// Fixture A: one prosumer, two steps.
    pub(crate) fn fixture_a() -> MarketInstance {
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
    fn fixture_a_vectorization() {
        let inst = fixture_a();
        assert_eq!(inst.q(), &[2.0, 2.0]);
        assert_eq!(inst.c(), &[0.0, -4.0]);
        assert_eq!(inst.ell(), &[-3.0, -1.0]);
        assert_eq!(inst.u(), &[1.0, 3.0]);
        assert_eq!(inst.d(), &[-2.0]);
        assert_eq!(inst.p(), &[1.0, 1.0]);
    }

    #[test]
    fn fixture_a_matches_dense_evaluation() {
        // Independent dense check of the vectorization formulas.
        let inst = fixture_a();
        let profile = &inst.profiles()[0];
        let q = DMatrix::from_diagonal(&DVector::from_vec(profile.q.clone()));
        let h0 = DVector::from_vec(profile.h0.clone());
        let s = DVector::from_vec(profile.s.clone());
        let c = &q * (&h0 - &s);
        for (expected, got) in c.iter().zip(inst.c()) {
            assert_abs_diff_eq!(expected, got, epsilon = 1e-15);
        }
        // The implicit aggregation matrix must act like the dense row [-1, -1].
        let e = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        let y = DVector::from_vec(vec![0.25, -1.5]);
        let dense = &e * &y;
        let implicit = inst.apply_equality(y.as_slice());
        assert_abs_diff_eq!(dense[0], implicit[0], epsilon = 1e-15);
        // d from the constraint itself: -sum y = h_tot - sum s at y = s - h0.
        let s_sum: f64 = profile.s.iter().sum();
        assert_abs_diff_eq!(profile.h_tot - s_sum, inst.d()[0], epsilon = 1e-15);
    }

    #[test]
    fn single_step_forced_arithmetic() {
        let profile = ProsumerProfile {
            q: vec![1.0],
            h0: vec![1.0],
            h_lb: vec![0.0],
            h_ub: vec![1.0],
            h_tot: 1.0,
            s: vec![0.0],
        };
        let inst = assemble(vec![profile], &[0.5]).unwrap();
        assert_eq!(inst.c(), &[1.0]);
        assert_eq!(inst.ell(), &[-1.0]);
        assert_eq!(inst.u(), &[0.0]);
        assert_eq!(inst.d(), &[1.0]);
    }

    #[test]
    fn assumption_violation_rejected() {
        let profile = ProsumerProfile {
            q: vec![1.0, 1.0],
            h0: vec![1.5, 1.5],
            h_lb: vec![0.0, 0.0],
            h_ub: vec![2.0, 2.0],
            h_tot: 2.0,
            s: vec![0.0, 0.0],
        };
        let err = assemble(vec![profile], &[1.0, 1.0]).unwrap_err();
        match err {
            MarketError::InvalidProfile { field, .. } => assert_eq!(field, "h_tot"),
            other => panic!("expected InvalidProfile, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_horizons_rejected() {
        let a = ProsumerProfile {
            q: vec![1.0, 1.0],
            h0: vec![1.0, 1.0],
            h_lb: vec![0.0, 0.0],
            h_ub: vec![2.0, 2.0],
            h_tot: 2.0,
            s: vec![0.0, 0.0],
        };
        let b = ProsumerProfile {
            q: vec![1.0],
            h0: vec![1.0],
            h_lb: vec![0.0],
            h_ub: vec![2.0],
            h_tot: 1.0,
            s: vec![0.0],
        };
        assert!(matches!(
            assemble(vec![a, b], &[1.0, 1.0]),
            Err(MarketError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn validate_fixture_a_all_pass() {
        let inst = fixture_a();
        let tol = Tolerances::default();
        let reduced = reduce_instance(&inst, &tol);
        // r = (0, 2) against u = (1, 3).
        assert_abs_diff_eq!(reduced.r[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(reduced.r[1], 2.0, epsilon = 1e-12);
        let report = validate(&inst, Some(&reduced), &tol);
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn validate_flags_degenerate_preferred_values() {
        // h0 equal to the lower bound makes u > r fail at both steps.
        let profile = ProsumerProfile {
            q: vec![2.0, 2.0],
            h0: vec![1.0, 1.0],
            h_lb: vec![1.0, 1.0],
            h_ub: vec![4.0, 4.0],
            h_tot: 2.0,
            s: vec![1.0, 3.0],
        };
        let inst = assemble(vec![profile], &[1.0, 1.0]).unwrap();
        let tol = Tolerances::default();
        let report = validate(&inst, None, &tol);
        assert!(!report.u_above_r.passed);
        assert_eq!(report.u_above_r.offending, vec![0, 1]);
        // Same verdict through the reduced model.
        let reduced = reduce_instance(&inst, &tol);
        let report = validate(&inst, Some(&reduced), &tol);
        assert!(!report.u_above_r.passed);
        assert_eq!(report.u_above_r.offending, vec![0, 1]);
    }

    #[test]
    fn validate_flags_positive_lower_bounds() {
        // s above h_ub makes ell positive at both steps.
        let profile = ProsumerProfile {
            q: vec![1.0, 1.0],
            h0: vec![2.0, 2.0],
            h_lb: vec![0.0, 0.0],
            h_ub: vec![4.0, 4.0],
            h_tot: 4.0,
            s: vec![5.0, 5.0],
        };
        let inst = assemble(vec![profile], &[1.0, 1.0]).unwrap();
        let report = validate(&inst, None, &Tolerances::default());
        assert!(!report.ell_nonpositive.passed);
        assert_eq!(report.ell_nonpositive.offending, vec![0, 1]);
        assert_abs_diff_eq!(report.ell_nonpositive.margin, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn reconstruct_demand_fixture() {
        let inst = fixture_a();
        let tol = Tolerances::default();
        let h = reconstruct_demand(&inst, &[0.0, 2.0], &tol).unwrap();
        assert_eq!(h, vec![1.0, 1.0]);
        let total: f64 = h.iter().sum();
        assert_abs_diff_eq!(total, inst.profiles()[0].h_tot, epsilon = 1e-12);
    }

    #[test]
    fn reconstruct_demand_rejects_equality_violation() {
        let inst = fixture_a();
        let tol = Tolerances::default();
        // y = s violates Ey = d here (d = -2 but -sum s = -4).
        let err = reconstruct_demand(&inst, &[1.0, 3.0], &tol).unwrap_err();
        assert!(matches!(err, MarketError::EqualityViolated { .. }));
        // Perturbing a valid y by 1.0 also fails.
        let err = reconstruct_demand(&inst, &[0.0, 3.0], &tol).unwrap_err();
        match err {
            MarketError::EqualityViolated { residual, .. } => {
                assert_abs_diff_eq!(residual, 1.0, epsilon = 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            split_net_exchange(&[0.0, 2.0]),
            (vec![0.0, 2.0], vec![0.0, 0.0])
        );
        assert_eq!(
            split_net_exchange(&[-3.0, 1.0]),
            (vec![0.0, 1.0], vec![3.0, 0.0])
        );
        assert_eq!(
            split_net_exchange(&[0.0, 0.0]),
            (vec![0.0, 0.0], vec![0.0, 0.0])
        );
    }

    #[test]
    fn instance_json_round_trip() {
        let inst = fixture_a();
        let text = inst.to_json();
        let parsed = MarketInstance::from_json(&text).unwrap();
        assert_eq!(parsed.q(), inst.q());
        assert_eq!(parsed.c(), inst.c());
        assert_eq!(parsed.ell(), inst.ell());
        assert_eq!(parsed.u(), inst.u());
        assert_eq!(parsed.d(), inst.d());
        assert_eq!(parsed.p(), inst.p());
    }

    #[test]
    fn json_rejects_bad_prices_length() {
        let text = r#"{"K": 2, "grid_prices": [1.0], "prosumers": [
            {"q": [1.0, 1.0], "h0": [1.0, 1.0], "h_lb": [0.0, 0.0],
             "h_ub": [2.0, 2.0], "h_tot": 2.0, "s": [0.0, 0.0]}]}"#;
        assert!(matches!(
            MarketInstance::from_json(text),
            Err(MarketError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn json_rejects_negative_weights() {
        let text = r#"{"K": 1, "grid_prices": [1.0], "prosumers": [
            {"q": [-1.0], "h0": [1.0], "h_lb": [0.0], "h_ub": [2.0],
             "h_tot": 1.0, "s": [0.0]}]}"#;
        assert!(matches!(
            MarketInstance::from_json(text),
            Err(MarketError::InvalidProfile { field: "q", .. })
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn profile_strategy(k: usize) -> impl Strategy<Value = ProsumerProfile> {
            (
                proptest::collection::vec(0.5..2.0f64, k),
                proptest::collection::vec(0.01..2.0f64, k),
                proptest::collection::vec(0.0..2.0f64, k),
            )
                .prop_map(move |(q, h0, s)| {
                    let h_tot: f64 = h0.iter().sum();
                    let h_ub: Vec<f64> = h0
                        .iter()
                        .zip(s.iter())
                        .map(|(&a, &b)| a.max(b) + 0.5)
                        .collect();
                    ProsumerProfile {
                        q,
                        h_lb: vec![0.0; k],
                        h_ub,
                        h_tot,
                        s,
                        h0,
                    }
                })
        }

        proptest! {
            #[test]
            fn assembled_invariants_hold(
                profiles in proptest::collection::vec(profile_strategy(3), 1..4),
                prices in proptest::collection::vec(-1.0..3.0f64, 3),
            ) {
                let inst = assemble(profiles.clone(), &prices).unwrap();
                let k = inst.horizon();
                for (i, profile) in profiles.iter().enumerate() {
                    let s_sum: f64 = profile.s.iter().sum();
                    prop_assert!((inst.d()[i] - (profile.h_tot - s_sum)).abs() < 1e-12);
                    for step in 0..k {
                        let idx = i * k + step;
                        let c = profile.q[step] * (profile.h0[step] - profile.s[step]);
                        prop_assert!((inst.c()[idx] - c).abs() < 1e-12);
                        prop_assert!(inst.ell()[idx] <= inst.u()[idx]);
                    }
                }
            }

            #[test]
            fn split_parts_are_nonnegative_and_disjoint(
                y in proptest::collection::vec(-5.0..5.0f64, 1..8)
            ) {
                let (plus, minus) = split_net_exchange(&y);
                for i in 0..y.len() {
                    prop_assert!(plus[i] >= 0.0 && minus[i] >= 0.0);
                    prop_assert!(plus[i] * minus[i] == 0.0);
                    prop_assert!((plus[i] - minus[i] - y[i]).abs() < 1e-15);
                }
            }

            #[test]
            fn reconstruction_inverts_elimination(
                profiles in proptest::collection::vec(profile_strategy(3), 1..3),
            ) {
                let prices = vec![1.0; 3];
                let inst = assemble(profiles.clone(), &prices).unwrap();
                // Demand vector on the equality manifold: h = h0.
                let y: Vec<f64> = profiles
                    .iter()
                    .flat_map(|p| {
                        p.s.iter()
                            .zip(p.h0.iter())
                            .map(|(&s, &h)| s - h)
                            .collect::<Vec<_>>()
                    })
                    .collect();
                let h = reconstruct_demand(&inst, &y, &Tolerances::default()).unwrap();
                let h0: Vec<f64> = profiles.iter().flat_map(|p| p.h0.clone()).collect();
                for (a, b) in h.iter().zip(h0.iter()) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }
}
