//! Brute-force global search over the true bilevel objective.
//!
//! The oracle evaluates `phi(x) = (x - p)^T y(x)` with `y(x)` computed by
//! the exact lower-level solver at every probe, so it is independent of the
//! reduction and of the convex reformulation it is used to test. The grid
//! search sweeps a full lattice over `[0, x_max]^m`, runs rounds of
//! shrinking-box coordinate refinement (golden-section per coordinate,
//! swept to a stall) from the incumbent, and finishes with a projected
//! simplex polish; the incumbent is only ever replaced by a strict
//! improvement, so refinement cannot regress. Cost grows as `steps^m`, so
//! the grid path refuses dimensions above [`MAX_GRID_DIM`]; the multistart
//! coordinate descent serves as a scalability cross-check beyond that.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

use crate::cvx::phi_value;
use crate::llp::{solve_llp_mode, BoundMode};
use crate::market::MarketInstance;

/// Largest dimension the full grid search accepts.
pub const MAX_GRID_DIM: usize = 6;

const GOLDEN_ITERS: usize = 40;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid search rejected: m = {m} exceeds the cap of {max} (cost is steps^m)")]
    DimensionTooLarge { m: usize, max: usize },
    #[error("instance is infeasible for the lower level")]
    InfeasibleInstance,
    #[error("invalid search parameters: {0}")]
    BadParameters(String),
}

/// Search metadata carried by every oracle result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchMeta {
    pub x_max: Vec<f64>,
    pub coarse_steps: usize,
    pub refine_rounds: usize,
    pub evaluations: usize,
    /// Incumbent ended within relative distance 1e-6 of the search box
    /// ceiling — treat the result as suspect.
    pub boundary_touch: bool,
}

/// Best point found by a global search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_x: Vec<f64>,
    pub best_y: Vec<f64>,
    pub best_phi: f64,
    pub meta: SearchMeta,
}

/// Per-coordinate search bound: a saturation level beyond which the clipped
/// response along that coordinate can no longer move in the profitable
/// direction.
pub fn default_x_max(instance: &MarketInstance) -> Vec<f64> {
    (0..instance.m())
        .map(|j| {
            instance.p()[j].abs()
                + instance.c()[j].abs()
                + instance.q()[j] * (instance.u()[j] - instance.ell()[j])
                + 1.0
        })
        .collect()
}

struct Objective<'a> {
    instance: &'a MarketInstance,
    mode: BoundMode,
    evaluations: AtomicUsize,
}

impl Objective<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        match solve_llp_mode(self.instance, x, self.mode) {
            Ok(sol) => phi_value(self.instance.p(), x, &sol.y),
            Err(_) => f64::INFINITY,
        }
    }
}

fn lexicographic_less(a: &[f64], b: &[f64]) -> bool {
    for (ai, bi) in a.iter().zip(b.iter()) {
        if ai < bi {
            return true;
        }
        if ai > bi {
            return false;
        }
    }
    false
}

/// Deterministic incumbent preference: lower phi, ties broken by
/// lexicographically smaller x.
fn better(phi_a: f64, x_a: &[f64], phi_b: f64, x_b: &[f64]) -> bool {
    phi_a < phi_b || (phi_a == phi_b && lexicographic_less(x_a, x_b))
}

/// Golden-section line search for the minimum of `f` on `[lo, hi]`.
/// Returns the best evaluated point; `f` need not be unimodal, in which
/// case this is a heuristic probe.
fn golden_section(f: &mut impl FnMut(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let inv_phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let mut a = lo;
    let mut b = hi;
    let mut best_t = a;
    let mut best_v = f(a);
    let v_hi = f(b);
    if v_hi < best_v {
        best_t = b;
        best_v = v_hi;
    }
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..GOLDEN_ITERS {
        if fc < best_v {
            best_t = c;
            best_v = fc;
        }
        if fd < best_v {
            best_t = d;
            best_v = fd;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (best_t, best_v)
}

/// Rounds of shrinking-box coordinate refinement around the incumbent.
/// Within a round, coordinate sweeps repeat until they stall, followed by a
/// line search along the round's net displacement; pure one-pass coordinate
/// descent zigzags in curved valleys and stalls short of the minimum.
fn refine(
    objective: &Objective,
    x_max: &[f64],
    rounds: usize,
    mut best_x: Vec<f64>,
    mut best_phi: f64,
) -> (Vec<f64>, f64) {
    let m = x_max.len();
    for round in 1..=rounds {
        let shrink = 0.5_f64.powi(round as i32);
        for _sweep in 0..20 {
            let before = best_phi;
            for coord in 0..m {
                let half = 0.5 * x_max[coord] * shrink;
                let lo = (best_x[coord] - half).max(0.0);
                let hi = (best_x[coord] + half).min(x_max[coord]);
                if hi <= lo {
                    continue;
                }
                let mut probe = best_x.clone();
                let mut line = |t: f64| {
                    probe[coord] = t;
                    objective.eval(&probe)
                };
                let (t, v) = golden_section(&mut line, lo, hi);
                if v < best_phi {
                    best_phi = v;
                    best_x[coord] = t;
                }
            }
            if before - best_phi <= 1e-12 * (1.0 + best_phi.abs()) {
                break;
            }
        }
    }
    if rounds > 0 {
        // Coordinate moves stall on the creases where the lower-level
        // active set changes; a simplex polish walks along them.
        let scale: Vec<f64> = x_max
            .iter()
            .map(|&cap| (cap * 0.5_f64.powi(rounds as i32)).max(1e-6))
            .collect();
        let (x, phi) = nelder_mead(objective, x_max, &best_x, best_phi, &scale);
        if phi < best_phi {
            best_phi = phi;
            best_x = x;
        }
    }
    (best_x, best_phi)
}

/// Nelder-Mead simplex descent restricted to `[0, x_max]` by projection.
/// Returns the best evaluated point; used as the final refinement stage.
fn nelder_mead(
    objective: &Objective,
    x_max: &[f64],
    x0: &[f64],
    phi0: f64,
    scale: &[f64],
) -> (Vec<f64>, f64) {
    let m = x_max.len();
    let project = |x: &mut Vec<f64>| {
        for coord in 0..m {
            x[coord] = x[coord].clamp(0.0, x_max[coord]);
        }
    };
    let mut simplex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(m + 1);
    simplex.push((phi0, x0.to_vec()));
    for coord in 0..m {
        let mut vertex = x0.to_vec();
        // Step away from the nearer box face.
        vertex[coord] += if x0[coord] + scale[coord] <= x_max[coord] {
            scale[coord]
        } else {
            -scale[coord]
        };
        project(&mut vertex);
        simplex.push((objective.eval(&vertex), vertex));
    }
    let max_iter = 400 * m;
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
        let best = simplex[0].0;
        let worst = simplex[m].0;
        let spread = worst - best;
        let diameter = (0..m)
            .map(|c| {
                simplex
                    .iter()
                    .map(|(_, v)| v[c])
                    .fold(f64::NEG_INFINITY, f64::max)
                    - simplex.iter().map(|(_, v)| v[c]).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0_f64, f64::max);
        if spread <= 1e-12 * (1.0 + best.abs()) && diameter <= 1e-9 {
            break;
        }
        let centroid: Vec<f64> = (0..m)
            .map(|c| simplex[..m].iter().map(|(_, v)| v[c]).sum::<f64>() / m as f64)
            .collect();
        let worst_x = simplex[m].1.clone();
        let mut reflected: Vec<f64> = (0..m)
            .map(|c| centroid[c] + (centroid[c] - worst_x[c]))
            .collect();
        project(&mut reflected);
        let f_reflected = objective.eval(&reflected);
        if f_reflected < simplex[0].0 {
            let mut expanded: Vec<f64> = (0..m)
                .map(|c| centroid[c] + 2.0 * (centroid[c] - worst_x[c]))
                .collect();
            project(&mut expanded);
            let f_expanded = objective.eval(&expanded);
            simplex[m] = if f_expanded < f_reflected {
                (f_expanded, expanded)
            } else {
                (f_reflected, reflected)
            };
        } else if f_reflected < simplex[m - 1].0 {
            simplex[m] = (f_reflected, reflected);
        } else {
            let mut contracted: Vec<f64> = if f_reflected < simplex[m].0 {
                (0..m)
                    .map(|c| centroid[c] + 0.5 * (reflected[c] - centroid[c]))
                    .collect()
            } else {
                (0..m)
                    .map(|c| centroid[c] + 0.5 * (worst_x[c] - centroid[c]))
                    .collect()
            };
            project(&mut contracted);
            let f_contracted = objective.eval(&contracted);
            if f_contracted < simplex[m].0.min(f_reflected) {
                simplex[m] = (f_contracted, contracted);
            } else {
                // Shrink toward the best vertex.
                let anchor = simplex[0].1.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let mut vertex: Vec<f64> = (0..m)
                        .map(|c| anchor[c] + 0.5 * (entry.1[c] - anchor[c]))
                        .collect();
                    project(&mut vertex);
                    *entry = (objective.eval(&vertex), vertex);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
    (simplex[0].1.clone(), simplex[0].0)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    objective: &Objective,
    instance: &MarketInstance,
    mode: BoundMode,
    best_x: Vec<f64>,
    best_phi: f64,
    x_max: Vec<f64>,
    coarse_steps: usize,
    refine_rounds: usize,
) -> Result<OracleResult, OracleError> {
    let best = solve_llp_mode(instance, &best_x, mode)
        .map_err(|_| OracleError::InfeasibleInstance)?;
    debug_assert!(
        best.kkt_residual <= 1e-8,
        "incumbent response must be a KKT point (residual {})",
        best.kkt_residual
    );
    let best_y = best.y;
    let boundary_touch = best_x
        .iter()
        .zip(x_max.iter())
        .any(|(&x, &cap)| cap > 0.0 && x >= cap - 1e-6 * (1.0 + cap));
    Ok(OracleResult {
        best_x,
        best_y,
        best_phi,
        meta: SearchMeta {
            x_max,
            coarse_steps,
            refine_rounds,
            evaluations: objective.evaluations.load(Ordering::Relaxed),
            boundary_touch,
        },
    })
}

/// Exhaustive lattice search over `[0, x_max]^m` followed by coordinate
/// refinement, with both response bounds active.
pub fn oracle_grid(
    instance: &MarketInstance,
    x_max: &[f64],
    coarse_steps: usize,
    refine_rounds: usize,
) -> Result<OracleResult, OracleError> {
    oracle_grid_mode(instance, BoundMode::Both, x_max, coarse_steps, refine_rounds)
}

/// Grid oracle for the chosen bound mode.
pub fn oracle_grid_mode(
    instance: &MarketInstance,
    mode: BoundMode,
    x_max: &[f64],
    coarse_steps: usize,
    refine_rounds: usize,
) -> Result<OracleResult, OracleError> {
    let m = instance.m();
    if m > MAX_GRID_DIM {
        return Err(OracleError::DimensionTooLarge { m, max: MAX_GRID_DIM });
    }
    if x_max.len() != m {
        return Err(OracleError::BadParameters(format!(
            "x_max has length {}, expected {m}",
            x_max.len()
        )));
    }
    if x_max.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(OracleError::BadParameters("x_max must be positive".into()));
    }
    if coarse_steps < 2 {
        return Err(OracleError::BadParameters("need at least 2 steps per axis".into()));
    }
    let objective = Objective {
        instance,
        mode,
        evaluations: AtomicUsize::new(0),
    };
    // Fail fast on infeasible instances (feasibility does not depend on x).
    if solve_llp_mode(instance, &vec![0.0; m], mode).is_err() {
        return Err(OracleError::InfeasibleInstance);
    }

    let total = coarse_steps.pow(m as u32);
    let decode = |mut index: usize| -> Vec<f64> {
        let mut x = vec![0.0; m];
        for coord in 0..m {
            let step = index % coarse_steps;
            index /= coarse_steps;
            x[coord] = x_max[coord] * step as f64 / (coarse_steps - 1) as f64;
        }
        x
    };
    let identity = (f64::INFINITY, Vec::new());
    let (best_phi, best_x) = (0..total)
        .into_par_iter()
        .map(|index| {
            let x = decode(index);
            (objective.eval(&x), x)
        })
        .reduce(
            || identity.clone(),
            |a, b| {
                if better(b.0, &b.1, a.0, &a.1) {
                    b
                } else {
                    a
                }
            },
        );
    if !best_phi.is_finite() {
        return Err(OracleError::InfeasibleInstance);
    }

    let (best_x, best_phi) = refine(&objective, x_max, refine_rounds, best_x, best_phi);
    finish(
        &objective,
        instance,
        mode,
        best_x,
        best_phi,
        x_max.to_vec(),
        coarse_steps,
        refine_rounds,
    )
}

/// Coordinate descent from seeded random nonnegative starts (the first
/// start is always the origin). Secondary witness for dimensions where the
/// grid is out of reach.
pub fn oracle_multistart(
    instance: &MarketInstance,
    starts: usize,
    seed: u64,
) -> Result<OracleResult, OracleError> {
    oracle_multistart_mode(instance, BoundMode::Both, starts, seed, None)
}

/// Multistart oracle for the chosen bound mode and optional explicit box.
pub fn oracle_multistart_mode(
    instance: &MarketInstance,
    mode: BoundMode,
    starts: usize,
    seed: u64,
    x_max: Option<&[f64]>,
) -> Result<OracleResult, OracleError> {
    let m = instance.m();
    let x_max = match x_max {
        Some(v) => {
            if v.len() != m {
                return Err(OracleError::BadParameters(format!(
                    "x_max has length {}, expected {m}",
                    v.len()
                )));
            }
            v.to_vec()
        }
        None => default_x_max(instance),
    };
    if x_max.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(OracleError::BadParameters("x_max must be positive".into()));
    }
    if starts == 0 {
        return Err(OracleError::BadParameters("need at least one start".into()));
    }
    let objective = Objective {
        instance,
        mode,
        evaluations: AtomicUsize::new(0),
    };
    if solve_llp_mode(instance, &vec![0.0; m], mode).is_err() {
        return Err(OracleError::InfeasibleInstance);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_x = vec![0.0; m];
    let mut best_phi = objective.eval(&best_x);
    for start in 0..starts {
        let mut x: Vec<f64> = if start == 0 {
            vec![0.0; m]
        } else {
            (0..m).map(|j| rng.gen_range(0.0..=x_max[j])).collect()
        };
        let mut phi = objective.eval(&x);
        for _sweep in 0..60 {
            let before = phi;
            for coord in 0..m {
                let mut probe = x.clone();
                let mut line = |t: f64| {
                    probe[coord] = t;
                    objective.eval(&probe)
                };
                let (t, v) = golden_section(&mut line, 0.0, x_max[coord]);
                if v < phi {
                    phi = v;
                    x[coord] = t;
                }
            }
            if before - phi <= 1e-12 * (1.0 + phi.abs()) {
                break;
            }
        }
        if better(phi, &x, best_phi, &best_x) {
            best_phi = phi;
            best_x = x;
        }
    }
    finish(
        &objective,
        instance,
        mode,
        best_x,
        best_phi,
        x_max,
        0,
        0,
    )
}
