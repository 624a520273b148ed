// Indexed loops over parallel numeric arrays read better than zipped
// iterator chains here.
#![allow(clippy::needless_range_loop)]

//! Command-line harness: instance generation, validation, reduction,
//! end-to-end solves, oracle comparison, benchmarks, and the rolling
//! real-time-market simulation.
//!
//! Exit codes: 0 success (and compare PASS), 1 generic failure or compare
//! FAIL, 2 hypothesis violation, 3 infeasible instance.

mod bench;
mod sim;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rtm_core::cvx::{certify_bilevel, solution_json, solve_cvx, BoundMode, CvxError};
use rtm_core::generator::{generate, GeneratorConfig};
use rtm_core::market::{reconstruct_demand, validate, MarketInstance};
use rtm_core::oracle::{default_x_max, oracle_grid_mode, oracle_multistart_mode, OracleResult};
use rtm_core::reduction::{reduce_instance, write_matrix_text, write_vector_text, ReducedModel};
use rtm_core::tol::Tolerances;

const EXIT_HYPOTHESIS: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "rtm", version, about = "Aggregator-prosumer real-time market toolkit")]
struct Cli {
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random market instance.
    Gen(GenArgs),
    /// Validate an instance against the model invariants and hypotheses.
    Validate(ValidateArgs),
    /// Compute the reduced response map (M, r) with certificates.
    Reduce(ReduceArgs),
    /// Solve the convex pricing problem end to end.
    Solve(SolveArgs),
    /// Run the brute-force global search.
    Oracle(OracleArgs),
    /// Solve both ways and diff the objectives.
    Compare(CompareArgs),
    /// Runtime-scaling benchmark, CSV output.
    Bench(bench::BenchArgs),
    /// Rolling real-time-market simulation.
    Simulate(sim::SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BoundModeArg {
    Both,
    Lower,
    Upper,
}

impl From<BoundModeArg> for BoundMode {
    fn from(value: BoundModeArg) -> Self {
        match value {
            BoundModeArg::Both => BoundMode::Both,
            BoundModeArg::Lower => BoundMode::LowerOnly,
            BoundModeArg::Upper => BoundMode::UpperOnly,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(short = 'n', long)]
    n: usize,
    #[arg(short = 'k', long = "K")]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generate without forcing the response-map hypotheses.
    #[arg(long)]
    no_hypothesis: bool,
    #[arg(long, default_value_t = 0.5)]
    q_min: f64,
    #[arg(long, default_value_t = 2.0)]
    q_max: f64,
    #[arg(long, default_value_t = 0.0)]
    s_min: f64,
    #[arg(long, default_value_t = 2.0)]
    s_max: f64,
    #[arg(long, default_value_t = 2.0)]
    h0_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    price_min: f64,
    #[arg(long, default_value_t = 2.0)]
    price_max: f64,
    /// Output path; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(short, long)]
    input: PathBuf,
}

#[derive(Args)]
struct ReduceArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// JSON report path; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write PREFIX.m.txt / PREFIX.r.txt in the dense text format.
    #[arg(long)]
    dump_text: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Solution JSON path; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BoundModeArg::Both)]
    bound_mode: BoundModeArg,
    /// Downgrade hypothesis violations to warnings.
    #[arg(long)]
    force: bool,
    /// Solver residual target.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Grid resolution per axis.
    #[arg(long, default_value_t = 21)]
    steps: usize,
    /// Refinement rounds after the coarse grid.
    #[arg(long, default_value_t = 5)]
    refine: usize,
    /// Multistart count; 0 selects the full grid.
    #[arg(long, default_value_t = 0)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Search box ceiling per coordinate (comma separated, or one value
    /// broadcast); saturation bound when omitted.
    #[arg(long)]
    x_max: Option<String>,
    #[arg(long, value_enum, default_value_t = BoundModeArg::Both)]
    bound_mode: BoundModeArg,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Grid resolution; chosen from the dimension when omitted.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 5)]
    refine: usize,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: thread pool already initialized: {err}");
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Reduce(args) => cmd_reduce(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Bench(args) => bench::run(args),
        Command::Simulate(args) => sim::run(args),
    }
}

fn load_instance(path: &Path) -> Result<MarketInstance> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading instance file {}", path.display()))?;
    MarketInstance::from_json(&text)
        .with_context(|| format!("parsing instance file {}", path.display()))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn tolerances(tol: Option<f64>) -> Tolerances {
    match tol {
        Some(t) => Tolerances::default().with_solver_tolerance(t),
        None => Tolerances::default(),
    }
}

fn cvx_exit(err: &CvxError) -> u8 {
    match err {
        CvxError::HypothesisViolated { .. } => EXIT_HYPOTHESIS,
        CvxError::Infeasible | CvxError::Unbounded { .. } => EXIT_INFEASIBLE,
        _ => 1,
    }
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let config = GeneratorConfig {
        n: args.n,
        k: args.k,
        seed: args.seed,
        q_range: (args.q_min, args.q_max),
        s_range: (args.s_min, args.s_max),
        h0_scale: args.h0_scale,
        price_range: (args.price_min, args.price_max),
        hypothesis_mode: !args.no_hypothesis,
    };
    let instance = generate(&config);
    write_output(args.output.as_deref(), &instance.to_json())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode> {
    let instance = load_instance(&args.input)?;
    let tol = Tolerances::default();
    let reduced = reduce_instance(&instance, &tol);
    let report = validate(&instance, Some(&reduced), &tol);
    let rows = [
        ("profile invariants", &report.profile_invariants),
        ("total-demand assumption", &report.assumption_total_demand),
        ("block feasibility", &report.llp_feasible),
        ("ell <= 0", &report.ell_nonpositive),
        ("u >= 0", &report.u_nonnegative),
        ("u > r (strict)", &report.u_above_r),
    ];
    for (name, check) in rows {
        let verdict = if check.passed { "PASS" } else { "FAIL" };
        let mut line = format!("{verdict}  {name:<24} margin {:>12.4e}", check.margin);
        if !check.passed {
            let shown: Vec<String> = check
                .offending
                .iter()
                .take(8)
                .map(|i| i.to_string())
                .collect();
            line.push_str(&format!(
                "  offending [{}{}]",
                shown.join(", "),
                if check.offending.len() > 8 { ", ..." } else { "" }
            ));
        }
        println!("{line}");
    }
    println!(
        "M-matrix certificate: {} (max off-diagonal {:.3e}, min eigenvalue {:.3e})",
        if reduced.cert_mmatrix.passed { "PASS" } else { "FAIL" },
        reduced.cert_mmatrix.max_off_diagonal,
        reduced.cert_mmatrix.min_eigenvalue,
    );
    if !report.llp_feasible.passed {
        return Ok(ExitCode::from(EXIT_INFEASIBLE));
    }
    if !report.all_passed() {
        return Ok(ExitCode::from(EXIT_HYPOTHESIS));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_reduce(args: ReduceArgs) -> Result<ExitCode> {
    let instance = load_instance(&args.input)?;
    let tol = Tolerances::default();
    let model = reduce_instance(&instance, &tol);
    let m = model.m();
    let mut report = serde_json::json!({
        "n": instance.n(),
        "K": instance.horizon(),
        "m": m,
        "r": model.r,
        "certificates": {
            "psd": model.cert_psd,
            "mmatrix": model.cert_mmatrix,
            "structured": model.cert_structured,
        },
    });
    if m <= 50 {
        let dense = model.matrix.to_dense();
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| dense[(i, j)]).collect())
            .collect();
        report["M"] = serde_json::json!(rows);
    } else {
        report["M"] = serde_json::json!(format!(
            "structured: {} blocks of {}x{}",
            instance.n(),
            instance.horizon(),
            instance.horizon()
        ));
    }
    write_output(args.output.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    if let Some(prefix) = args.dump_text {
        dump_text(&model, &prefix, m)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn dump_text(model: &ReducedModel, prefix: &Path, m: usize) -> Result<()> {
    if m > 2000 {
        bail!("refusing to densify m = {m} for the text dump (cap 2000)");
    }
    let m_path = prefix.with_extension("m.txt");
    let r_path = prefix.with_extension("r.txt");
    let mut m_file = fs::File::create(&m_path)
        .with_context(|| format!("creating {}", m_path.display()))?;
    write_matrix_text(&mut m_file, &model.matrix.to_dense())?;
    let mut r_file = fs::File::create(&r_path)
        .with_context(|| format!("creating {}", r_path.display()))?;
    write_vector_text(&mut r_file, &model.r)?;
    println!("wrote {} and {}", m_path.display(), r_path.display());
    Ok(())
}

fn cmd_solve(args: SolveArgs) -> Result<ExitCode> {
    let instance = load_instance(&args.input)?;
    let tol = tolerances(args.tol);
    let mode: BoundMode = args.bound_mode.into();
    let reduced = reduce_instance(&instance, &tol);
    let mut solution = match solve_cvx(&reduced, &instance, mode, args.force, &tol) {
        Ok(solution) => solution,
        Err(err) => {
            eprintln!("solve failed: {err}");
            return Ok(ExitCode::from(cvx_exit(&err)));
        }
    };
    if args.force {
        warn_on_hypotheses(&instance, &reduced, &tol);
    }
    // Bilevel certification is defined against the two-sided response.
    let certificate = (mode == BoundMode::Both)
        .then(|| certify_bilevel(&instance, &reduced, &solution, &tol));
    solution.consistency = certificate.map(|c| c.response_residual);
    let json = solution_json(&solution, certificate.as_ref());
    write_output(args.output.as_deref(), &serde_json::to_string_pretty(&json)?)?;
    eprintln!(
        "phi = {:.6e}, residuals (primal {:.2e}, dual {:.2e}), certified: {}",
        solution.phi,
        solution.residuals.primal,
        solution.residuals.dual,
        certificate.map_or("n/a".to_string(), |c| c.passed.to_string()),
    );
    Ok(ExitCode::SUCCESS)
}

fn warn_on_hypotheses(instance: &MarketInstance, reduced: &ReducedModel, tol: &Tolerances) {
    let report = validate(instance, Some(reduced), tol);
    if !report.hypotheses_passed() {
        eprintln!(
            "warning: optimality hypotheses violated (ell<=0: {}, u>=0: {}, u>r: {}); \
             the convex optimum need not solve the bilevel problem",
            report.ell_nonpositive.passed, report.u_nonnegative.passed, report.u_above_r.passed,
        );
    }
}

fn parse_x_max(spec: &str, m: usize) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|part| part.trim().parse::<f64>().context("parsing --x-max"))
        .collect::<Result<_>>()?;
    match parts.len() {
        1 => Ok(vec![parts[0]; m]),
        len if len == m => Ok(parts),
        len => bail!("--x-max has {len} entries, expected 1 or {m}"),
    }
}

fn oracle_json(result: &OracleResult, method: &str) -> serde_json::Value {
    serde_json::json!({
        "x": result.best_x,
        "y": result.best_y,
        "phi": result.best_phi,
        "method": method,
        "evaluations": result.meta.evaluations,
        "boundary_touch": result.meta.boundary_touch,
        "x_max": result.meta.x_max,
        "steps": result.meta.coarse_steps,
        "refine_rounds": result.meta.refine_rounds,
    })
}

fn cmd_oracle(args: OracleArgs) -> Result<ExitCode> {
    let instance = load_instance(&args.input)?;
    let mode: BoundMode = args.bound_mode.into();
    let x_max = match &args.x_max {
        Some(spec) => parse_x_max(spec, instance.m())?,
        None => default_x_max(&instance),
    };
    let (result, method) = if args.starts > 0 {
        let result = oracle_multistart_mode(&instance, mode, args.starts, args.seed, Some(&x_max));
        (result, "multistart")
    } else {
        let result = oracle_grid_mode(&instance, mode, &x_max, args.steps, args.refine);
        (result, "grid")
    };
    let result = match result {
        Ok(result) => result,
        Err(err) => {
            eprintln!("oracle failed: {err}");
            let code = match err {
                rtm_core::oracle::OracleError::InfeasibleInstance => EXIT_INFEASIBLE,
                _ => 1,
            };
            return Ok(ExitCode::from(code));
        }
    };
    write_output(
        args.output.as_deref(),
        &serde_json::to_string_pretty(&oracle_json(&result, method))?,
    )?;
    eprintln!(
        "phi = {:.6e} after {} evaluations{}",
        result.best_phi,
        result.meta.evaluations,
        if result.meta.boundary_touch {
            " (boundary touch: suspect)"
        } else {
            ""
        },
    );
    Ok(ExitCode::SUCCESS)
}

/// Grid resolution that keeps steps^m around or below ~5e5 evaluations.
fn auto_steps(m: usize) -> usize {
    match m {
        0 | 1 => 61,
        2 => 61,
        3 => 31,
        4 => 17,
        5 => 11,
        _ => 9,
    }
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode> {
    let instance = load_instance(&args.input)?;
    let tol = tolerances(args.tol);
    let reduced = reduce_instance(&instance, &tol);
    let mut solution = match solve_cvx(&reduced, &instance, BoundMode::Both, args.force, &tol) {
        Ok(solution) => solution,
        Err(err) => {
            eprintln!("solve failed: {err}");
            return Ok(ExitCode::from(cvx_exit(&err)));
        }
    };
    if args.force {
        warn_on_hypotheses(&instance, &reduced, &tol);
    }
    let certificate = certify_bilevel(&instance, &reduced, &solution, &tol);
    solution.consistency = Some(certificate.response_residual);
    let steps = args.steps.unwrap_or_else(|| auto_steps(instance.m()));
    let x_max = default_x_max(&instance);
    let oracle = match oracle_grid_mode(&instance, BoundMode::Both, &x_max, steps, args.refine) {
        Ok(result) => result,
        Err(err) => {
            eprintln!("oracle failed: {err}");
            let code = match err {
                rtm_core::oracle::OracleError::InfeasibleInstance => EXIT_INFEASIBLE,
                _ => 1,
            };
            return Ok(ExitCode::from(code));
        }
    };

    let gap = (solution.phi - oracle.best_phi).abs();
    let rel_gap = gap / (1.0 + oracle.best_phi.abs());
    let argmin_distance = solution
        .x
        .iter()
        .zip(oracle.best_x.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let pass = rel_gap <= tol.value_gap && certificate.passed;
    let h = reconstruct_demand(&instance, &solution.y, &tol).ok();

    let report = serde_json::json!({
        "pass": pass,
        "phi_cvx": solution.phi,
        "phi_oracle": oracle.best_phi,
        "gap": gap,
        "rel_gap": rel_gap,
        "argmin_distance": argmin_distance,
        "certified": certificate.passed,
        "response_residual": certificate.response_residual,
        "x": solution.x,
        "y": solution.y,
        "h": h,
        "x_oracle": oracle.best_x,
        "oracle_evaluations": oracle.meta.evaluations,
        "oracle_boundary_touch": oracle.meta.boundary_touch,
    });
    write_output(args.output.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    println!(
        "{} gap = {gap:.3e} (relative {rel_gap:.3e}), argmin distance {argmin_distance:.3e}, certified: {}",
        if pass { "PASS" } else { "FAIL" },
        certificate.passed,
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
