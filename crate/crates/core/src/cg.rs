//! Matrix-free conjugate gradients on the Kronecker-form posterior system.
//!
//! Works directly on N×m stacks (the reshaped unknown), with a fixed working
//! set of four blocks: the iterate x, the recursive residual r, the search
//! direction p, and Q̂p. Convergence is tested on the recursively updated
//! residual relative to ‖rhs‖; the reported residual is recomputed
//! explicitly at the end to guard against drift.

use std::time::Instant;

use crate::operators::PosteriorOperator;
use crate::report::{Method, PhaseTimes, SolveReport};
use crate::{Error, MapStack, Result};

/// Conjugate-gradient controls.
#[derive(Debug, Clone, Copy)]
pub struct CgConfig {
    /// Relative residual tolerance, ‖r‖₂ ≤ tol·‖rhs‖₂.
    pub tol: f64,
    pub max_iter: usize,
    /// Record the per-iteration relative residuals in the report.
    pub record_history: bool,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            record_history: false,
        }
    }
}

impl CgConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::Config(format!(
                "CG tolerance must be positive and finite, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("CG max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solves Q̂μ = rhs from a zero initial guess.
pub fn solve_cg(
    op: &PosteriorOperator<'_>,
    rhs: &MapStack,
    cfg: &CgConfig,
) -> Result<(MapStack, SolveReport)> {
    solve_cg_observed(op, rhs, cfg, |_, _, _| {})
}

/// As [`solve_cg`], invoking `observer(iteration, x, r)` after every
/// iteration with the current iterate and recursive residual; used by tests
/// that track the error trajectory.
pub fn solve_cg_observed(
    op: &PosteriorOperator<'_>,
    rhs: &MapStack,
    cfg: &CgConfig,
    mut observer: impl FnMut(usize, &MapStack, &MapStack),
) -> Result<(MapStack, SolveReport)> {
    cfg.validate()?;
    rhs.check_rows(op.npix())?;
    if rhs.cols() != op.m() {
        return Err(Error::Shape(format!(
            "rhs has {} columns, model has {} sources",
            rhs.cols(),
            op.m()
        )));
    }
    let start = Instant::now();
    let mut phases = PhaseTimes::default();
    let (npix, m) = (op.npix(), op.m());
    let peak_mem_bytes = (4 * npix * m + npix) as u64 * 8;

    let rhs_norm = rhs.norm();
    if !rhs_norm.is_finite() {
        return Err(Error::Breakdown {
            iteration: 0,
            reason: "right-hand side is not finite".into(),
        });
    }
    let mut history = cfg.record_history.then(Vec::new);
    let mut x = MapStack::zeros(npix, m);
    if rhs_norm == 0.0 {
        return Ok((
            x,
            SolveReport {
                method: Method::Cg,
                converged: true,
                iterations: 0,
                rel_residual: 0.0,
                weighted_rel_residual: None,
                wall_time_s: start.elapsed().as_secs_f64(),
                history,
                peak_mem_bytes,
                peak_blocks: 4,
                phases,
            },
        ));
    }

    let t = Instant::now();
    let mut r = rhs.clone();
    let mut p = rhs.clone();
    let mut q = MapStack::zeros(npix, m);
    let mut rho = r.dot(&r)?;
    phases.orthogonalization += t.elapsed().as_secs_f64();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iter {
        let t = Instant::now();
        op.apply_into(&p, &mut q)?;
        phases.d_apply += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let pq = p.dot(&q)?;
        let alpha = rho / pq;
        if !alpha.is_finite() {
            return Err(Error::Breakdown {
                iteration: iter,
                reason: format!("nonfinite step: rho = {rho}, p·Q̂p = {pq}"),
            });
        }
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &q)?;
        let rho_next = r.dot(&r)?;
        if !rho_next.is_finite() {
            return Err(Error::Breakdown {
                iteration: iter,
                reason: format!("nonfinite residual norm² {rho_next}"),
            });
        }
        let rel = rho_next.sqrt() / rhs_norm;
        if let Some(h) = history.as_mut() {
            h.push(rel);
        }
        phases.orthogonalization += t.elapsed().as_secs_f64();
        observer(iter, &x, &r);
        iterations = iter;
        if rel <= cfg.tol {
            converged = true;
            break;
        }
        let t = Instant::now();
        p.xpay(rho_next / rho, &r)?;
        rho = rho_next;
        phases.orthogonalization += t.elapsed().as_secs_f64();
    }

    let t = Instant::now();
    op.apply_into(&x, &mut q)?;
    phases.d_apply += t.elapsed().as_secs_f64();
    let t = Instant::now();
    q.axpy(-1.0, rhs)?;
    let rel_residual = q.norm() / rhs_norm;
    phases.orthogonalization += t.elapsed().as_secs_f64();

    Ok((
        x,
        SolveReport {
            method: Method::Cg,
            converged,
            iterations,
            rel_residual,
            weighted_rel_residual: None,
            wall_time_s: start.elapsed().as_secs_f64(),
            history,
            peak_mem_bytes,
            peak_blocks: 4,
            phases,
        },
    ))
}
