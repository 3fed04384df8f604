//! The four subcommand implementations. Each returns the process exit code
//! on success-with-caveats paths (non-convergence) and a core error
//! otherwise; `main` maps error kinds to the documented exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ksep_core::cg::CgConfig;
use ksep_core::dense::assemble_dense;
use ksep_core::lanczos::{SylvesterOptions, SylvesterProblem};
use ksep_core::mapfile::{read_maps, write_maps, MapHeader};
use ksep_core::model::build_rhs;
use ksep_core::operators::PosteriorOperator;
use ksep_core::report::{Method, PhaseTimes, SolveReport};
use ksep_core::sparse_dense::{solve_sparse_dense, SparseDenseOptions};
use ksep_core::{
    simulate, solve_cg, solve_sylvester, Error, MapStack, ModelSpec, Result, SimConfig, SkyGrid,
};

/// Everything a single solve needs, resolved from flags, config and defaults.
pub struct SolveSetup {
    pub level: u32,
    pub method: Method,
    pub seed: u64,
    pub source_std: f64,
    pub noiseless: bool,
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub shifted_tol: f64,
    pub mem_budget: Option<u64>,
}

/// How often `compare` repeats each solve when aggregating wall times.
#[derive(Debug, Clone, Copy)]
pub enum Repeats {
    Fixed(u32),
    /// Repeat until roughly 0.2 s has been aggregated; stabilizes ratios at
    /// small levels where one solve is far below timer resolution.
    Auto,
}

pub fn parse_repeats(s: &str) -> std::result::Result<Repeats, String> {
    if s == "auto" {
        return Ok(Repeats::Auto);
    }
    s.parse::<u32>()
        .map_err(|_| format!("expected a repeat count or 'auto', got '{s}'"))
        .and_then(|k| {
            if k == 0 {
                Err("repeat count must be at least 1".into())
            } else {
                Ok(Repeats::Fixed(k))
            }
        })
}

/// A prepared problem whose solve can be run repeatedly for timing.
enum Prepared<'a> {
    Cg {
        op: PosteriorOperator<'a>,
        rhs: MapStack,
        cfg: CgConfig,
    },
    Sylvester {
        problem: SylvesterProblem<'a>,
        opts: SylvesterOptions,
    },
    SparseDense {
        problem: SylvesterProblem<'a>,
        opts: SparseDenseOptions,
    },
    Dense {
        grid: &'a SkyGrid,
        model: &'a ModelSpec,
        y: &'a MapStack,
    },
}

impl<'a> Prepared<'a> {
    fn new(
        grid: &'a SkyGrid,
        model: &'a ModelSpec,
        y: &'a MapStack,
        setup: &SolveSetup,
    ) -> Result<Self> {
        Ok(match setup.method {
            Method::Cg => Prepared::Cg {
                op: PosteriorOperator::new(grid, model)?,
                rhs: build_rhs(model, y)?,
                cfg: CgConfig {
                    tol: setup.tol,
                    max_iter: setup.max_iter.unwrap_or(10_000),
                    record_history: false,
                },
            },
            Method::LanczosSylvester => Prepared::Sylvester {
                problem: SylvesterProblem::new(grid, model, y)?,
                opts: SylvesterOptions {
                    tol: setup.tol,
                    max_iter: setup.max_iter,
                    ..SylvesterOptions::default()
                },
            },
            Method::SparseDense => Prepared::SparseDense {
                problem: SylvesterProblem::new(grid, model, y)?,
                opts: SparseDenseOptions {
                    shifted_tol: setup.shifted_tol,
                    max_inner_iter: setup.max_iter.unwrap_or(10_000),
                    assembled: None,
                    mem_budget: setup.mem_budget,
                },
            },
            Method::Dense => Prepared::Dense { grid, model, y },
        })
    }

    fn solve(&self) -> Result<(MapStack, SolveReport)> {
        match self {
            Prepared::Cg { op, rhs, cfg } => solve_cg(op, rhs, cfg),
            Prepared::Sylvester { problem, opts } => solve_sylvester(problem, opts),
            Prepared::SparseDense { problem, opts } => solve_sparse_dense(problem, opts),
            Prepared::Dense { grid, model, y } => solve_dense(grid, model, y),
        }
    }
}

/// Direct dense factorization, reported in the same shape as the iterative
/// methods so `compare` rows stay uniform.
fn solve_dense(grid: &SkyGrid, model: &ModelSpec, y: &MapStack) -> Result<(MapStack, SolveReport)> {
    let start = Instant::now();
    let mut phases = PhaseTimes::default();

    let t = Instant::now();
    let system = assemble_dense(grid, model)?;
    let rhs = build_rhs(model, y)?;
    let mu = system.solve(&rhs)?;
    phases.small_dense += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let op = PosteriorOperator::new(grid, model)?;
    let mut resid = op.apply(&mu)?;
    resid.axpy(-1.0, &rhs)?;
    let rhs_norm = rhs.norm();
    let rel_residual = if rhs_norm == 0.0 {
        0.0
    } else {
        resid.norm() / rhs_norm
    };
    phases.d_apply += t.elapsed().as_secs_f64();

    let dim = (model.m() * grid.npix()) as u64;
    let report = SolveReport {
        method: Method::Dense,
        converged: true,
        iterations: 1,
        rel_residual,
        weighted_rel_residual: None,
        wall_time_s: start.elapsed().as_secs_f64(),
        history: None,
        peak_mem_bytes: dim * dim * 8 + 3 * dim * 8,
        peak_blocks: model.m() * grid.npix(),
        phases,
    };
    Ok((mu, report))
}

/// Simulates data at the setup's level with a caller-supplied model builder.
pub fn simulate_with_model(
    setup: &SolveSetup,
    build: impl FnOnce(usize) -> Result<ModelSpec>,
) -> Result<(SkyGrid, ModelSpec, MapStack)> {
    let grid = SkyGrid::new(setup.level)?;
    let model = build(grid.npix())?;
    let cfg = SimConfig {
        level: setup.level,
        m: model.m(),
        n: model.n(),
        seed: setup.seed,
        source_std: setup.source_std,
        noiseless: setup.noiseless,
    };
    let (_, y) = simulate(&cfg, &grid, &model)?;
    Ok((grid, model, y))
}

pub struct SimulateOutput {
    pub s_true_path: PathBuf,
    pub y_path: PathBuf,
}

/// `ksep simulate`: writes `s_true.ksep` and `y.ksep` into the output
/// directory; identical arguments produce identical bytes.
pub fn cmd_simulate(
    cfg: &SimConfig,
    model: &ModelSpec,
    out_dir: &Path,
) -> Result<SimulateOutput> {
    let grid = SkyGrid::new(cfg.level)?;
    let (s_true, y) = simulate(cfg, &grid, model)?;
    std::fs::create_dir_all(out_dir)?;
    let header = MapHeader {
        level: cfg.level,
        seed: cfg.seed,
    };
    let s_true_path = out_dir.join("s_true.ksep");
    let y_path = out_dir.join("y.ksep");
    write_maps(&s_true_path, &s_true, &header)?;
    write_maps(&y_path, &y, &header)?;
    Ok(SimulateOutput { s_true_path, y_path })
}

/// `ksep solve`: obtains Y (from file or simulation), runs one method,
/// optionally writes `mu.ksep` + `report.json`, prints the report JSON.
/// Returns exit code 0 on convergence and 3 otherwise.
pub fn cmd_solve(
    setup: &SolveSetup,
    model_builder: impl FnOnce(usize) -> Result<ModelSpec>,
    input: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<i32> {
    let grid = SkyGrid::new(setup.level)?;
    let model = model_builder(grid.npix())?;
    let mut io_time = 0.0;
    let y = match input {
        Some(path) => {
            let t = Instant::now();
            let (y, header) = read_maps(path)?;
            io_time += t.elapsed().as_secs_f64();
            if header.level != setup.level {
                return Err(Error::Config(format!(
                    "input file is level {}, requested level {}",
                    header.level, setup.level
                )));
            }
            if y.rows() != grid.npix() {
                return Err(Error::Shape(format!(
                    "input has {} rows, level {} grid has {} pixels",
                    y.rows(),
                    setup.level,
                    grid.npix()
                )));
            }
            y
        }
        None => {
            let cfg = SimConfig {
                level: setup.level,
                m: model.m(),
                n: model.n(),
                seed: setup.seed,
                source_std: setup.source_std,
                noiseless: setup.noiseless,
            };
            simulate(&cfg, &grid, &model)?.1
        }
    };

    let prepared = Prepared::new(&grid, &model, &y, setup)?;
    let (mu, mut report) = prepared.solve()?;

    if let Some(dir) = out_dir {
        let t = Instant::now();
        std::fs::create_dir_all(dir)?;
        write_maps(
            &dir.join("mu.ksep"),
            &mu,
            &MapHeader {
                level: setup.level,
                seed: 0,
            },
        )?;
        io_time += t.elapsed().as_secs_f64();
        report.phases.io = io_time;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report.to_json()).expect("report serializes") + "\n",
        )?;
    } else {
        report.phases.io = io_time;
    }
    println!(
        "{}",
        serde_json::to_string(&report.to_json()).expect("report serializes")
    );
    Ok(if report.converged { 0 } else { 3 })
}

pub const COMPARE_HEADER: &str =
    "level,N,method,status,iterations,rel_residual,wall_time_s,peak_mem_bytes";

fn short_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Argument(_) => "argument",
        Error::Shape(_) => "shape",
        Error::Breakdown { .. } => "breakdown",
        Error::SingularPencil(_) => "singular-pencil",
        Error::OutOfMemory { .. } => "out-of-memory",
        Error::SizeGuard(_) => "size-guard",
        Error::Format { .. } => "format",
        Error::Io(_) => "io",
    }
}

/// Runs the prepared solve `repeats`-many times (or adaptively), returning
/// the last report and the fastest wall time per solve. Timing noise is
/// additive, so the minimum over repeats is the robust cost estimate.
fn timed_solve(prepared: &Prepared<'_>, repeats: Repeats) -> Result<(SolveReport, f64)> {
    match repeats {
        Repeats::Fixed(k) => {
            let mut best = f64::INFINITY;
            let mut last = None;
            for _ in 0..k {
                let (_, report) = prepared.solve()?;
                best = best.min(report.wall_time_s);
                last = Some(report);
            }
            Ok((last.expect("k >= 1"), best))
        }
        Repeats::Auto => {
            let (_, mut report) = prepared.solve()?;
            let mut best = f64::INFINITY;
            let mut total = 0.0;
            let mut count = 0u64;
            while total < 0.2 && count < 100_000 {
                let batch = count.max(1);
                for _ in 0..batch {
                    let (_, r) = prepared.solve()?;
                    total += r.wall_time_s;
                    best = best.min(r.wall_time_s);
                    report = r;
                }
                count += batch;
            }
            Ok((report, best))
        }
    }
}

/// `ksep compare`: one CSV row per (level, method); failures are recorded
/// in-row and the sweep continues.
pub fn cmd_compare(
    levels: &[u32],
    methods: &[Method],
    base: &SolveSetup,
    model_builder: impl Fn(usize) -> Result<ModelSpec>,
    repeats: Repeats,
    out: &mut dyn Write,
) -> Result<()> {
    writeln!(out, "{COMPARE_HEADER}")?;
    for &level in levels {
        let setup = SolveSetup { level, ..*base };
        let (grid, model, y) = simulate_with_model(&setup, &model_builder)?;
        for &method in methods {
            let setup = SolveSetup { method, ..setup };
            let row = Prepared::new(&grid, &model, &y, &setup)
                .and_then(|prepared| timed_solve(&prepared, repeats));
            match row {
                Ok((report, wall)) => {
                    let status = if report.converged { "ok" } else { "not-converged" };
                    writeln!(
                        out,
                        "{level},{},{method},{status},{},{:.6e},{:.6e},{}",
                        grid.npix(),
                        report.iterations,
                        report.rel_residual,
                        wall,
                        report.peak_mem_bytes
                    )?;
                }
                Err(err) => {
                    writeln!(out, "{level},{},{method},failed:{},,,,", grid.npix(), short_kind(&err))?;
                }
            }
        }
    }
    Ok(())
}

/// `ksep profile`: one solve, reported as the documented JSON breakdown.
pub fn cmd_profile(
    setup: &SolveSetup,
    model_builder: impl FnOnce(usize) -> Result<ModelSpec>,
) -> Result<serde_json::Value> {
    let (grid, model, y) = simulate_with_model(setup, model_builder)?;
    let prepared = Prepared::new(&grid, &model, &y, setup)?;
    let (_, report) = prepared.solve()?;
    Ok(serde_json::json!({
        "level": setup.level,
        "method": setup.method.as_str(),
        "wall_time_s": report.wall_time_s,
        "iterations": report.iterations,
        "rel_residual": report.rel_residual,
        "peak_mem_bytes": report.peak_mem_bytes,
        "phases": {
            "d_apply_s": report.phases.d_apply,
            "orthogonalization_s": report.phases.orthogonalization,
            "small_dense_s": report.phases.small_dense,
            "io_s": report.phases.io,
        },
    }))
}
