//! `ksep`: benchmark driver for the Kronecker-structured source separation
//! solvers. Subcommands: `simulate`, `solve`, `compare`, `profile`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
//! 3 non-convergence or numerical breakdown, 4 size guard, 5 memory budget
//! exceeded.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ksep_core::report::Method;
use ksep_core::{Error, Result, SimConfig};

use commands::{parse_repeats, Repeats, SolveSetup};
use config::FileConfig;

#[derive(Parser)]
#[command(name = "ksep", version, about = "Kronecker-structured source separation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sources and observed sky maps, writing both to disk.
    Simulate(SimulateArgs),
    /// Solve the posterior mean system with one method.
    Solve(SolveArgs),
    /// Benchmark methods across a level range and emit a CSV table.
    Compare(CompareArgs),
    /// Run one solve and emit a JSON phase/memory breakdown.
    Profile(ProfileArgs),
}

/// Flags shared by every subcommand; unset values fall back to the config
/// file, then to built-in defaults (flags win).
#[derive(Args)]
struct CommonArgs {
    /// Grid refinement level h (N = 4^h pixels).
    #[arg(long)]
    level: Option<u32>,

    /// RNG seed for simulation.
    #[arg(long)]
    seed: Option<u64>,

    /// TOML config file with [sim], [model] and [solver] sections.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Size of the global thread pool used by the parallel kernels.
    #[arg(long)]
    threads: Option<usize>,
}

/// Flags shared by the solving subcommands.
#[derive(Args)]
struct SolverArgs {
    /// Solution method.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,

    /// Relative residual tolerance.
    #[arg(long)]
    tol: Option<f64>,

    /// Iteration cap (per-method default if unset).
    #[arg(long)]
    max_iter: Option<usize>,

    /// Memory budget in bytes for the sparse-dense assembled mode.
    #[arg(long)]
    mem_budget: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Output directory for s_true.ksep and y.ksep.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,

    #[command(flatten)]
    solver: SolverArgs,

    /// Read observations Y from this map file instead of simulating.
    #[arg(long)]
    input: Option<PathBuf>,

    /// Output directory for mu.ksep and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,

    #[command(flatten)]
    solver: SolverArgs,

    /// Level range "A-B" (inclusive) or a single level; empty or inverted
    /// ranges produce a header-only table.
    #[arg(long, default_value = "1-4")]
    levels: String,

    /// Comma-separated method list.
    #[arg(long, default_value = "cg,lanczos-sylvester,sparse-dense")]
    methods: String,

    /// Solves per (level, method) cell: a count, or "auto" to repeat until
    /// the aggregate wall time supports a stable estimate; the fastest
    /// repeat is reported.
    #[arg(long, default_value = "1", value_parser = parse_repeats)]
    repeats: Repeats,

    /// CSV output path (stdout if unset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: CommonArgs,

    #[command(flatten)]
    solver: SolverArgs,

    /// JSON output path (always printed to stdout as well).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn parse_level_range(s: &str) -> Result<Vec<u32>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let parse = |tok: &str| {
        tok.trim()
            .parse::<u32>()
            .map_err(|_| Error::Argument(format!("invalid level '{tok}' in range '{s}'")))
    };
    match s.split_once('-') {
        Some((a, b)) => {
            let (a, b) = (parse(a)?, parse(b)?);
            Ok(if a > b { Vec::new() } else { (a..=b).collect() })
        }
        None => Ok(vec![parse(s)?]),
    }
}

fn parse_method_list(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Method>())
        .collect()
}

fn init_threads(threads: Option<usize>, file: &FileConfig) -> Result<()> {
    let threads = threads.or(file.solver.threads);
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Resolves flag → config-file → default precedence into one solve setup.
fn resolve_setup(common: &CommonArgs, solver: Option<&SolverArgs>, file: &FileConfig) -> Result<SolveSetup> {
    let method = match solver.and_then(|s| s.method) {
        Some(m) => m,
        None => match &file.solver.method {
            Some(name) => name.parse::<Method>()?,
            None => Method::LanczosSylvester,
        },
    };
    Ok(SolveSetup {
        level: common.level.or(file.sim.level).unwrap_or(3),
        method,
        seed: common.seed.or(file.sim.seed).unwrap_or(0),
        source_std: file.sim.source_std.unwrap_or(1.0),
        noiseless: file.sim.noiseless.unwrap_or(false),
        tol: solver.and_then(|s| s.tol).or(file.solver.tol).unwrap_or(1e-8),
        max_iter: solver.and_then(|s| s.max_iter).or(file.solver.max_iter),
        shifted_tol: file.solver.shifted_tol.unwrap_or(1e-12),
        mem_budget: solver.and_then(|s| s.mem_budget).or(file.solver.mem_budget),
    })
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate(args) => {
            let file = FileConfig::load(args.common.config.as_deref())?;
            init_threads(args.common.threads, &file)?;
            let setup = resolve_setup(&args.common, None, &file)?;
            let grid = ksep_core::SkyGrid::new(setup.level)?;
            let model = file.model.build_model(grid.npix())?;
            let cfg = SimConfig {
                level: setup.level,
                m: model.m(),
                n: model.n(),
                seed: setup.seed,
                source_std: setup.source_std,
                noiseless: setup.noiseless,
            };
            let out = commands::cmd_simulate(&cfg, &model, &args.out)?;
            println!(
                "wrote {} and {}",
                out.s_true_path.display(),
                out.y_path.display()
            );
            Ok(0)
        }
        Command::Solve(args) => {
            let file = FileConfig::load(args.common.config.as_deref())?;
            init_threads(args.common.threads, &file)?;
            let setup = resolve_setup(&args.common, Some(&args.solver), &file)?;
            commands::cmd_solve(
                &setup,
                |npix| file.model.build_model(npix),
                args.input.as_deref(),
                args.out.as_deref(),
            )
        }
        Command::Compare(args) => {
            let file = FileConfig::load(args.common.config.as_deref())?;
            init_threads(args.common.threads, &file)?;
            let setup = resolve_setup(&args.common, Some(&args.solver), &file)?;
            let levels = parse_level_range(&args.levels)?;
            let methods = parse_method_list(&args.methods)?;
            match &args.out {
                Some(path) => {
                    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
                    commands::cmd_compare(
                        &levels,
                        &methods,
                        &setup,
                        |npix| file.model.build_model(npix),
                        args.repeats,
                        &mut out,
                    )?;
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut out = stdout.lock();
                    commands::cmd_compare(
                        &levels,
                        &methods,
                        &setup,
                        |npix| file.model.build_model(npix),
                        args.repeats,
                        &mut out,
                    )?;
                }
            }
            Ok(0)
        }
        Command::Profile(args) => {
            let file = FileConfig::load(args.common.config.as_deref())?;
            init_threads(args.common.threads, &file)?;
            let setup = resolve_setup(&args.common, Some(&args.solver), &file)?;
            let json = commands::cmd_profile(&setup, |npix| file.model.build_model(npix))?;
            let text = serde_json::to_string_pretty(&json).expect("profile serializes");
            if let Some(path) = &args.out {
                std::fs::write(path, text.clone() + "\n")?;
            }
            println!("{text}");
            Ok(0)
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Shape(_) | Error::Format { .. } => 2,
        Error::Breakdown { .. } | Error::SingularPencil(_) => 3,
        Error::SizeGuard(_) => 4,
        Error::OutOfMemory { .. } => 5,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
