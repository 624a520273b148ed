//! Rolling real-time-market simulation.
//!
//! The market model describes a single horizon solve; the rolling protocol
//! here is harness behavior: each interval re-solves the remaining horizon
//! with the interval's price curve and applies only the first step. The
//! remaining total demand is the original total minus what has actually
//! been consumed, and the remaining preferred demands are rebalanced
//! proportionally (respecting the per-step bounds) so the per-prosumer
//! totals stay consistent.
//!
//! Price series format: CSV with header `interval,k,price`, where `k` is
//! the absolute step index. Every (interval, k) pair with
//! `interval <= k < K` must be present; missing entries are an error, not
//! an extrapolation.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use rtm_core::cvx::{certify_bilevel, solve_cvx, BoundMode, CvxError};
use rtm_core::market::{assemble, MarketError, MarketInstance, ProsumerProfile};
use rtm_core::reduction::reduce_instance;
use rtm_core::tol::Tolerances;

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Number of market intervals to run (at most K).
    #[arg(long)]
    intervals: usize,
    /// Price series CSV (interval,k,price).
    #[arg(long)]
    prices: PathBuf,
    /// Settlements JSON path; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct PriceRow {
    interval: usize,
    k: usize,
    price: f64,
}

#[derive(Debug, Serialize)]
struct Settlement {
    interval: usize,
    phi_window: f64,
    certified: bool,
    /// First-step prices per prosumer.
    x: Vec<f64>,
    /// First-step net exchange per prosumer.
    y: Vec<f64>,
    /// First-step demand per prosumer.
    h: Vec<f64>,
    /// First-step prosumer revenue (x - p) y per prosumer.
    prosumer_cash: Vec<f64>,
    /// First-step aggregator profit, sum of (p - x) y.
    aggregator_profit: f64,
}

fn load_prices(path: &PathBuf) -> Result<HashMap<(usize, usize), f64>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening price series {}", path.display()))?;
    let mut prices = HashMap::new();
    for (line, row) in reader.deserialize::<PriceRow>().enumerate() {
        let row = row.with_context(|| format!("price series row {}", line + 2))?;
        if !row.price.is_finite() {
            bail!("non-finite price at interval {}, k {}", row.interval, row.k);
        }
        prices.insert((row.interval, row.k), row.price);
    }
    Ok(prices)
}

/// Rescale preferred demands to the target total, respecting the per-step
/// bounds, by proportional scaling plus slack-weighted redistribution.
fn rebalance(h0: &[f64], lb: &[f64], ub: &[f64], target: f64) -> Vec<f64> {
    let lb_sum: f64 = lb.iter().sum();
    let ub_sum: f64 = ub.iter().sum();
    let target = target.clamp(lb_sum, ub_sum);
    let base: f64 = h0.iter().sum();
    let mut h: Vec<f64> = if base > 1e-12 {
        h0.iter().map(|&v| v * target / base).collect()
    } else {
        lb.to_vec()
    };
    for ((v, &lo), &hi) in h.iter_mut().zip(lb.iter()).zip(ub.iter()) {
        *v = v.clamp(lo, hi);
    }
    for _ in 0..64 {
        let total: f64 = h.iter().sum();
        let diff = target - total;
        if diff.abs() <= 1e-12 * (1.0 + target.abs()) {
            break;
        }
        let slack: Vec<f64> = if diff > 0.0 {
            h.iter().zip(ub.iter()).map(|(&v, &hi)| hi - v).collect()
        } else {
            h.iter().zip(lb.iter()).map(|(&v, &lo)| v - lo).collect()
        };
        let slack_total: f64 = slack.iter().sum();
        if slack_total <= 1e-15 {
            break;
        }
        for (v, &s) in h.iter_mut().zip(slack.iter()) {
            *v += diff * s / slack_total;
        }
    }
    h
}

fn window_instance(
    source: &MarketInstance,
    remaining_totals: &[f64],
    t: usize,
    prices: &HashMap<(usize, usize), f64>,
) -> Result<MarketInstance> {
    let k = source.horizon();
    let window: Vec<f64> = (t..k)
        .map(|step| {
            prices
                .get(&(t, step))
                .copied()
                .with_context(|| format!("price series is missing interval {t}, k {step}"))
        })
        .collect::<Result<_>>()?;
    let profiles: Vec<ProsumerProfile> = source
        .profiles()
        .iter()
        .zip(remaining_totals.iter())
        .map(|(profile, &target)| {
            let h0 = rebalance(
                &profile.h0[t..],
                &profile.h_lb[t..],
                &profile.h_ub[t..],
                target,
            );
            let h_tot = h0.iter().sum();
            ProsumerProfile {
                q: profile.q[t..].to_vec(),
                h0,
                h_lb: profile.h_lb[t..].to_vec(),
                h_ub: profile.h_ub[t..].to_vec(),
                h_tot,
                s: profile.s[t..].to_vec(),
            }
        })
        .collect();
    assemble(profiles, &window).map_err(|err| anyhow::anyhow!("interval {t}: {err}"))
}

pub fn run(args: SimulateArgs) -> Result<ExitCode> {
    let source = {
        let text = std::fs::read_to_string(&args.input)
            .with_context(|| format!("reading instance file {}", args.input.display()))?;
        MarketInstance::from_json(&text)
            .with_context(|| format!("parsing instance file {}", args.input.display()))?
    };
    if args.intervals == 0 {
        bail!("--intervals must be positive");
    }
    if args.intervals > source.horizon() {
        bail!(
            "cannot run {} intervals over a {}-step horizon",
            args.intervals,
            source.horizon()
        );
    }
    let prices = load_prices(&args.prices)?;
    let tol = match args.tol {
        Some(t) => Tolerances::default().with_solver_tolerance(t),
        None => Tolerances::default(),
    };

    let mut remaining_totals: Vec<f64> =
        source.profiles().iter().map(|p| p.h_tot).collect();
    let mut settlements = Vec::with_capacity(args.intervals);
    for t in 0..args.intervals {
        let window = match window_instance(&source, &remaining_totals, t, &prices) {
            Ok(instance) => instance,
            Err(err) => {
                if err.downcast_ref::<MarketError>().is_some_and(|e| {
                    matches!(e, MarketError::InfeasibleBlock { .. })
                }) {
                    eprintln!("error: {err:#}");
                    return Ok(ExitCode::from(3));
                }
                return Err(err);
            }
        };
        let reduced = reduce_instance(&window, &tol);
        let solution = match solve_cvx(&reduced, &window, BoundMode::Both, args.force, &tol) {
            Ok(solution) => solution,
            Err(err) => {
                eprintln!("interval {t}: solve failed: {err}");
                let code = match err {
                    CvxError::HypothesisViolated { .. } => 2,
                    CvxError::Infeasible | CvxError::Unbounded { .. } => 3,
                    _ => 1,
                };
                return Ok(ExitCode::from(code));
            }
        };
        let certificate = certify_bilevel(&window, &reduced, &solution, &tol);

        let rem = source.horizon() - t;
        let p_first = window.grid_prices()[0];
        let mut x_first = Vec::with_capacity(window.n());
        let mut y_first = Vec::with_capacity(window.n());
        let mut h_first = Vec::with_capacity(window.n());
        let mut prosumer_cash = Vec::with_capacity(window.n());
        let mut aggregator_profit = 0.0;
        for i in 0..window.n() {
            let idx = i * rem;
            let x0 = solution.x[idx];
            let y0 = solution.y[idx];
            let s0 = window.profiles()[i].s[0];
            let h_step = (s0 - y0).clamp(
                window.profiles()[i].h_lb[0],
                window.profiles()[i].h_ub[0],
            );
            x_first.push(x0);
            y_first.push(y0);
            h_first.push(h_step);
            prosumer_cash.push((x0 - p_first) * y0);
            aggregator_profit += (p_first - x0) * y0;
            remaining_totals[i] -= h_step;
        }
        settlements.push(Settlement {
            interval: t,
            phi_window: solution.phi,
            certified: certificate.passed,
            x: x_first,
            y: y_first,
            h: h_first,
            prosumer_cash,
            aggregator_profit,
        });
    }

    let report = serde_json::json!({ "intervals": settlements });
    let text = serde_json::to_string_pretty(&report)?;
    match &args.output {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
