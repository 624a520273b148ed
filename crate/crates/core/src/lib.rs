// Indexed loops over parallel numeric arrays read better than zipped
// iterator chains here.
#![allow(clippy::needless_range_loop)]

//! Real-time market toolkit for an aggregator pricing the net energy
//! exchange of a fleet of prosumers.
//!
//! The library covers the full pipeline:
//!
//! * [`market`] — prosumer profiles, instance assembly (demand elimination
//!   and vectorization), validation, and the instance JSON format.
//! * [`reduction`] — elimination of the equality dual from the lower-level
//!   KKT system, producing the affine response map `y = Mx + r` together
//!   with PSD / M-matrix / structure certificates.
//! * [`llp`] — exact solver for the prosumers' response problem (a strictly
//!   convex QP per prosumer block) plus a splitting-based solver for the
//!   general non-diagonal variants.
//! * [`qp`] — the dense operator-splitting box-QP engine shared by the
//!   solvers above.
//! * [`cvx`] — the convex surrogate of the aggregator's bilevel pricing
//!   problem and the bilevel-consistency certifier.
//! * [`oracle`] — brute-force grid / multistart global search over the true
//!   bilevel objective, used as ground truth at desk scale.
//! * [`generator`] — seeded random instance generation for tests, sweeps,
//!   and benchmarks.

pub mod cvx;
pub mod generator;
pub mod llp;
pub mod market;
pub mod oracle;
pub mod qp;
pub mod reduction;
pub mod tol;

pub use cvx::{certify_bilevel, solve_cvx, BilevelCertificate, BilevelSolution, BoundMode};
pub use generator::{generate, GeneratorConfig};
pub use llp::{kkt_residual, solve_llp, solve_llp_general, solve_llp_mode, LlpSolution};
pub use market::{
    assemble, reconstruct_demand, split_net_exchange, validate, MarketInstance, ProsumerProfile,
    ValidationReport,
};
pub use oracle::{default_x_max, oracle_grid, oracle_multistart, OracleResult};
pub use reduction::{
    check_mmatrix, check_psd, check_structured_preconditions, compute_reduced, reduce_instance,
    ReducedMatrix, ReducedModel,
};
pub use tol::Tolerances;
