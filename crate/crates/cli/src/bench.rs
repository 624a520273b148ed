//! Runtime-scaling benchmark: generate hypothesis instances across a size
//! sweep, time the convex solve, and emit one CSV row per size.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use rtm_core::cvx::{solve_cvx, BoundMode};
use rtm_core::generator::{generate, GeneratorConfig};
use rtm_core::reduction::reduce_instance;
use rtm_core::tol::Tolerances;

#[derive(Args)]
pub struct BenchArgs {
    /// Sizes as comma-separated NxK pairs.
    #[arg(long, default_value = "10x2,100x2,1000x2,200x96")]
    sizes: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Repetitions per size; the fastest run is reported.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// CSV path; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct BenchRecord {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub solver: String,
    pub wall_time_s: f64,
    pub iterations: usize,
    pub phi: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub seed: u64,
}

fn parse_sizes(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(',')
        .map(|part| {
            let (n, k) = part
                .trim()
                .split_once('x')
                .with_context(|| format!("size '{part}' is not of the form NxK"))?;
            Ok((n.parse()?, k.parse()?))
        })
        .collect()
}

pub fn run(args: BenchArgs) -> Result<ExitCode> {
    let sizes = parse_sizes(&args.sizes)?;
    if args.reps == 0 {
        bail!("--reps must be positive");
    }
    let tol = Tolerances::default();
    let mut records = Vec::new();
    for (index, &(n, k)) in sizes.iter().enumerate() {
        let config = GeneratorConfig {
            n,
            k,
            seed: args.seed.wrapping_add(index as u64),
            ..GeneratorConfig::default()
        };
        let instance = generate(&config);
        let reduced = reduce_instance(&instance, &tol);
        let mut best_time = f64::INFINITY;
        let mut solution = None;
        for _ in 0..args.reps {
            let start = Instant::now();
            let run = solve_cvx(&reduced, &instance, BoundMode::Both, false, &tol)
                .with_context(|| format!("convex solve failed at n={n}, K={k}"))?;
            best_time = best_time.min(start.elapsed().as_secs_f64());
            solution = Some(run);
        }
        let solution = solution.expect("at least one rep ran");
        records.push(BenchRecord {
            m: n * k,
            n,
            k,
            solver: "cvx".into(),
            wall_time_s: best_time,
            iterations: solution.residuals.iterations,
            phi: solution.phi,
            primal_residual: solution.residuals.primal,
            dual_residual: solution.residuals.dual,
            seed: config.seed,
        });
        eprintln!(
            "m = {:>6}: {:.4}s, {} iterations, phi = {:.4e}",
            n * k,
            best_time,
            solution.residuals.iterations,
            solution.phi
        );
    }
    let mut writer: csv::Writer<Box<dyn std::io::Write>> = match &args.output {
        Some(path) => csv::Writer::from_writer(Box::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => csv::Writer::from_writer(Box::new(std::io::stdout())),
    };
    for record in &records {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(ExitCode::SUCCESS)
}
