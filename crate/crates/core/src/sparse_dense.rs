//! Baseline Sylvester solver: real Schur decomposition of the small
//! coefficient Ŝ followed by sequential shifted solves with the large
//! operator H = N⁻¹D².
//!
//! The reference formulation needs the complete sparse representation of H.
//! By default this module stays matrix-free and runs the shifted solves with
//! CG in the hit-count inner product; an assembled-CSR path is available for
//! N ≤ 4⁶ and, combined with a configurable byte budget, reproduces the
//! out-of-memory failure mode of the assembled method deterministically.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::grid::SkyGrid;
use crate::lanczos::SylvesterProblem;
use crate::report::{Method, PhaseTimes, SolveReport};
use crate::stack::for_chunks_mut;
use crate::{Error, MapStack, Result};

/// Largest pixel count for which the CSR representation of H may be
/// assembled (4⁶, one level above the dense-oracle regime).
pub const MAX_ASSEMBLED_DIM: usize = 4096;

/// Controls for [`solve_sparse_dense`].
#[derive(Debug, Clone, Copy)]
pub struct SparseDenseOptions {
    /// Relative tolerance of each inner shifted CG solve.
    pub shifted_tol: f64,
    /// Iteration cap per inner solve.
    pub max_inner_iter: usize,
    /// `Some(true)` forces the assembled-CSR kernel, `Some(false)` forces
    /// matrix-free; `None` assembles exactly when a memory budget is set and
    /// the size guard admits it.
    pub assembled: Option<bool>,
    /// Byte budget for the assembled representation of H; exceeding it fails
    /// the solve before any assembly happens.
    pub mem_budget: Option<u64>,
}

impl Default for SparseDenseOptions {
    fn default() -> Self {
        Self {
            shifted_tol: 1e-12,
            max_inner_iter: 10_000,
            assembled: None,
            mem_budget: None,
        }
    }
}

/// Compressed sparse rows of H = N⁻¹D², columns sorted within each row.
struct SparseH {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// The exact byte footprint the CSR representation of H would need
/// (values, column indices and row offsets), countable without assembling.
pub fn assembled_bytes(grid: &SkyGrid) -> Result<u64> {
    let mut nnz = 0u64;
    let mut row = BTreeMap::new();
    for j in 0..grid.npix() {
        d_squared_row(grid, j, &mut row)?;
        nnz += row.len() as u64;
    }
    Ok(nnz * 16 + (grid.npix() as u64 + 1) * 8)
}

/// One row of D² as a sorted column→value map: row j of D is
/// (−c_j at j, 1 at each neighbor), and (D²)_j· = Σ_i D_ji · D_i·.
fn d_squared_row(grid: &SkyGrid, j: usize, row: &mut BTreeMap<usize, f64>) -> Result<()> {
    row.clear();
    let mut stencil = |i: usize, coef: f64| -> Result<()> {
        *row.entry(i).or_insert(0.0) += -coef * grid.neighbor_count(i) as f64;
        for k in grid.neighbors(i)? {
            *row.entry(k).or_insert(0.0) += coef;
        }
        Ok(())
    };
    stencil(j, -(grid.neighbor_count(j) as f64))?;
    for i in grid.neighbors(j)? {
        stencil(i, 1.0)?;
    }
    Ok(())
}

impl SparseH {
    fn assemble(grid: &SkyGrid, ninv: &[f64]) -> Result<Self> {
        let n = grid.npix();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        let mut row = BTreeMap::new();
        for j in 0..n {
            d_squared_row(grid, j, &mut row)?;
            for (&k, &v) in &row {
                cols.push(k);
                vals.push(v * ninv[j]);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            row_ptr,
            cols,
            vals,
        })
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for_chunks_mut(out, |offset, chunk| {
            for (idx, o) in chunk.iter_mut().enumerate() {
                let j = offset + idx;
                let mut acc = 0.0;
                for t in self.row_ptr[j]..self.row_ptr[j + 1] {
                    acc += self.vals[t] * x[self.cols[t]];
                }
                *o = acc;
            }
        });
    }
}

enum HKernel<'a> {
    Free(&'a SylvesterProblem<'a>),
    Assembled(SparseH),
}

impl HKernel<'_> {
    fn apply(&self, x: &MapStack, out: &mut MapStack) -> Result<()> {
        match self {
            HKernel::Free(problem) => problem.apply_h_into(x, out),
            HKernel::Assembled(h) => {
                x.check_same_shape(out)?;
                h.apply(x.col(0), out.col_mut(0));
                Ok(())
            }
        }
    }
}

fn weighted_dot(x: &MapStack, y: &MapStack, w: &[f64]) -> Result<f64> {
    Ok(x.gram(y, Some(w))?[(0, 0)])
}

/// CG for (H + ρI)x = f in the ⟨·,·⟩_N inner product, where the shifted
/// operator is self-adjoint positive definite. Returns the solution, the
/// iteration count, and whether the tolerance was met.
fn shifted_cg(
    kernel: &HKernel<'_>,
    n_weights: &[f64],
    rho: f64,
    f: &MapStack,
    opts: &SparseDenseOptions,
    phases: &mut PhaseTimes,
) -> Result<(MapStack, usize, bool)> {
    let t = Instant::now();
    let npix = f.rows();
    let mut x = MapStack::zeros(npix, 1);
    let mut q = MapStack::zeros(npix, 1);
    let f_norm_sq = weighted_dot(f, f, n_weights)?;
    if f_norm_sq == 0.0 {
        phases.orthogonalization += t.elapsed().as_secs_f64();
        return Ok((x, 0, true));
    }
    let mut r = f.clone();
    let mut p = r.clone();
    let mut rho_acc = f_norm_sq;
    let threshold = opts.shifted_tol * opts.shifted_tol * f_norm_sq;
    phases.orthogonalization += t.elapsed().as_secs_f64();
    for iter in 1..=opts.max_inner_iter {
        let t = Instant::now();
        kernel.apply(&p, &mut q)?;
        phases.d_apply += t.elapsed().as_secs_f64();
        let t = Instant::now();
        q.axpy(rho, &p)?;
        let pq = weighted_dot(&p, &q, n_weights)?;
        if !(pq > 0.0) || !pq.is_finite() {
            return Err(Error::Breakdown {
                iteration: iter,
                reason: format!("shifted operator lost positive definiteness (pᵀ(H+ρ)p = {pq})"),
            });
        }
        let alpha = rho_acc / pq;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &q)?;
        let rho_next = weighted_dot(&r, &r, n_weights)?;
        if rho_next.is_finite() && rho_next > threshold {
            p.xpay(rho_next / rho_acc, &r)?;
            rho_acc = rho_next;
            phases.orthogonalization += t.elapsed().as_secs_f64();
            continue;
        }
        phases.orthogonalization += t.elapsed().as_secs_f64();
        if !rho_next.is_finite() {
            return Err(Error::Breakdown {
                iteration: iter,
                reason: "inner residual became non-finite".into(),
            });
        }
        return Ok((x, iter, true));
    }
    Ok((x, opts.max_inner_iter, false))
}

/// Solves H·M + M·Ŝ = Ŷ by the Schur/back-substitution baseline: Ŝ = WRWᵀ,
/// F̂ = ŶW, then for each Schur column (H + R_ii·I)X̂_i = F̂_i − Σ_{k<i}X̂_k·R_ki
/// and finally M = X̂·Wᵀ.
pub fn solve_sparse_dense(
    problem: &SylvesterProblem<'_>,
    opts: &SparseDenseOptions,
) -> Result<(MapStack, SolveReport)> {
    if !(opts.shifted_tol > 0.0) || !opts.shifted_tol.is_finite() {
        return Err(Error::Config(format!(
            "shifted solver tolerance must be positive and finite, got {}",
            opts.shifted_tol
        )));
    }
    if opts.max_inner_iter == 0 {
        return Err(Error::Config("max_inner_iter must be at least 1".into()));
    }
    let start = Instant::now();
    let mut phases = PhaseTimes::default();
    let (npix, m) = (problem.npix(), problem.m());

    let assemble = match opts.assembled {
        Some(choice) => choice,
        None => opts.mem_budget.is_some() && npix <= MAX_ASSEMBLED_DIM,
    };
    let mut csr_bytes = 0u64;
    if opts.assembled != Some(false) {
        if let Some(budget) = opts.mem_budget {
            let required = assembled_bytes(problem.grid())?;
            if required > budget {
                return Err(Error::OutOfMemory { required, budget });
            }
            csr_bytes = required;
        }
    }
    if assemble && npix > MAX_ASSEMBLED_DIM {
        return Err(Error::SizeGuard(format!(
            "assembled sparse H is limited to {MAX_ASSEMBLED_DIM} pixels, got {npix}"
        )));
    }
    let kernel = if assemble {
        let t = Instant::now();
        let ninv: Vec<f64> = problem.n_weights().iter().map(|w| 1.0 / w).collect();
        let h = SparseH::assemble(problem.grid(), &ninv)?;
        csr_bytes = (h.vals.len() * 16 + h.row_ptr.len() * 8) as u64;
        phases.d_apply += t.elapsed().as_secs_f64();
        HKernel::Assembled(h)
    } else {
        HKernel::Free(problem)
    };

    let t = Instant::now();
    let schur = nalgebra::Schur::try_new(problem.shat().clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Breakdown {
        iteration: 0,
        reason: "Schur decomposition of Shat did not converge".into(),
    })?;
    let (w, r) = schur.unpack();
    let ortho_defect = (w.transpose() * &w - DMatrix::identity(m, m)).amax();
    if ortho_defect > 1e-12 {
        return Err(Error::Breakdown {
            iteration: 0,
            reason: format!("Schur basis lost orthogonality (defect {ortho_defect:.3e})"),
        });
    }
    let scale = r.amax();
    for i in 1..m {
        if r[(i, i - 1)].abs() > 1e-10 * scale {
            return Err(Error::Breakdown {
                iteration: 0,
                reason: format!(
                    "Schur factor has a 2x2 block (subdiagonal {:.3e}); eigenvalues should be real",
                    r[(i, i - 1)]
                ),
            });
        }
    }
    let guard = (1e-14 * scale).max(f64::MIN_POSITIVE);
    phases.small_dense += t.elapsed().as_secs_f64();

    // xf starts as F̂ = Ŷ·W; column i is overwritten with X̂_i once solved.
    let t = Instant::now();
    let mut xf = problem.yhat().mul_small(&w)?;
    let mut rhs_col = MapStack::zeros(npix, 1);
    phases.small_dense += t.elapsed().as_secs_f64();
    let mut total_inner = 0usize;
    let mut all_converged = true;

    for i in 0..m {
        let rho = r[(i, i)];
        if rho <= guard {
            return Err(Error::SingularPencil(format!(
                "Schur eigenvalue {rho:.6e} makes the shifted operator singular"
            )));
        }
        let t = Instant::now();
        rhs_col.col_mut(0).copy_from_slice(xf.col(i));
        for k in 0..i {
            let coef = r[(k, i)];
            if coef != 0.0 {
                let xk = xf.col(k);
                for_chunks_mut(rhs_col.col_mut(0), |offset, chunk| {
                    for (idx, o) in chunk.iter_mut().enumerate() {
                        *o -= coef * xk[offset + idx];
                    }
                });
            }
        }
        phases.orthogonalization += t.elapsed().as_secs_f64();
        let (x_i, iters, converged) =
            shifted_cg(&kernel, problem.n_weights(), rho, &rhs_col, opts, &mut phases)?;
        total_inner += iters;
        all_converged &= converged;
        xf.col_mut(i).copy_from_slice(x_i.col(0));
    }

    let t = Instant::now();
    let solution = xf.mul_small(&w.transpose())?;
    phases.small_dense += t.elapsed().as_secs_f64();

    // Explicit residual, reusing xf as the workspace.
    let t = Instant::now();
    problem.apply_h_into(&solution, &mut xf)?;
    phases.d_apply += t.elapsed().as_secs_f64();
    let t = Instant::now();
    xf.add_mul_small(&solution, problem.shat(), 1.0)?;
    xf.axpy(-1.0, problem.yhat())?;
    let yhat_fro = problem.yhat().norm();
    let rel_residual = if yhat_fro == 0.0 {
        0.0
    } else {
        xf.norm() / yhat_fro
    };
    let weighted_num = xf
        .weighted_norm_sq(Some(problem.n_weights()), Some(problem.p()))?
        .sqrt();
    let weighted_den = problem
        .yhat()
        .weighted_norm_sq(Some(problem.n_weights()), None)?
        .sqrt();
    let weighted_rel_residual = if weighted_den == 0.0 {
        0.0
    } else {
        weighted_num / weighted_den
    };
    phases.orthogonalization += t.elapsed().as_secs_f64();

    let report = SolveReport {
        method: Method::SparseDense,
        converged: all_converged,
        iterations: total_inner,
        rel_residual,
        weighted_rel_residual: Some(weighted_rel_residual),
        wall_time_s: start.elapsed().as_secs_f64(),
        history: None,
        peak_mem_bytes: (2 * npix * m + 5 * npix) as u64 * 8 + csr_bytes + (m * m * 2) as u64 * 8,
        peak_blocks: 2,
        phases,
    };
    Ok((solution, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand_core::{RngCore, SeedableRng};

    fn random_stack(rows: usize, cols: usize, seed: u64) -> MapStack {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
            .collect();
        MapStack::from_vec(rows, cols, data).unwrap()
    }

    fn varied_model(npix: usize, tau: f64) -> ModelSpec {
        ModelSpec::planck_with_uniform_t(npix, tau)
            .unwrap()
            .with_nhits((0..npix).map(|j| 1.0 + (j % 3) as f64).collect())
            .unwrap()
            .with_p(vec![1.0, 0.5, 2.0, 1.25])
            .unwrap()
    }

    #[test]
    fn scalar_source_reduces_to_one_shifted_solve() {
        let grid = SkyGrid::new(2).unwrap();
        let npix = grid.npix();
        let yhat = random_stack(npix, 1, 5);
        let shat = DMatrix::from_element(1, 1, 3.0);
        let n_weights: Vec<f64> = (0..npix).map(|j| 1.0 + (j % 2) as f64).collect();
        let problem =
            SylvesterProblem::from_parts(&grid, yhat.clone(), shat, vec![1.0], n_weights).unwrap();
        let (m_sol, report) =
            solve_sparse_dense(&problem, &SparseDenseOptions::default()).unwrap();
        assert!(report.converged);
        let resid = problem.residual(&m_sol).unwrap();
        assert!(resid.norm() <= 1e-10 * yhat.norm());
    }

    #[test]
    fn small_problem_matches_the_dense_oracle() {
        let grid = SkyGrid::new(3).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 9);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let (m_sol, report) =
            solve_sparse_dense(&problem, &SparseDenseOptions::default()).unwrap();
        assert!(report.converged);
        assert!(report.rel_residual <= 1e-9);

        let oracle = crate::dense::assemble_dense(&grid, &model).unwrap();
        let rhs = crate::model::build_rhs(&model, &y).unwrap();
        let exact = oracle.solve(&rhs).unwrap();
        let mut diff = m_sol.clone();
        diff.axpy(-1.0, &exact).unwrap();
        assert!(diff.norm() <= 1e-8 * exact.norm());
    }

    #[test]
    fn assembled_and_matrix_free_paths_agree() {
        let grid = SkyGrid::new(3).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 13);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let free = solve_sparse_dense(&problem, &SparseDenseOptions::default())
            .unwrap()
            .0;
        let assembled_opts = SparseDenseOptions {
            assembled: Some(true),
            ..SparseDenseOptions::default()
        };
        let assembled = solve_sparse_dense(&problem, &assembled_opts).unwrap().0;
        let mut diff = free.clone();
        diff.axpy(-1.0, &assembled).unwrap();
        assert!(diff.norm() <= 1e-9 * free.norm());
    }

    #[test]
    fn assembled_bytes_counts_the_csr_footprint_exactly() {
        let grid = SkyGrid::new(3).unwrap();
        let required = assembled_bytes(&grid).unwrap();
        let ninv = vec![1.0; grid.npix()];
        let h = SparseH::assemble(&grid, &ninv).unwrap();
        assert_eq!(
            required,
            (h.vals.len() * 16 + h.row_ptr.len() * 8) as u64
        );
    }

    #[test]
    fn csr_apply_matches_the_stencil_kernel() {
        let grid = SkyGrid::new(3).unwrap();
        let npix = grid.npix();
        let ninv: Vec<f64> = (0..npix).map(|j| 1.0 / (1.0 + (j % 3) as f64)).collect();
        let h = SparseH::assemble(&grid, &ninv).unwrap();
        let x = random_stack(npix, 1, 17);
        let mut got = MapStack::zeros(npix, 1);
        h.apply(x.col(0), got.col_mut(0));

        let mut want = MapStack::zeros(npix, 1);
        grid.apply_d_squared_into(&x, &mut want).unwrap();
        want.scale_rows(&ninv).unwrap();
        let mut diff = got.clone();
        diff.axpy(-1.0, &want).unwrap();
        assert!(diff.max_abs() <= 1e-12 * want.max_abs());
    }

    #[test]
    fn memory_budget_fails_before_assembly() {
        let grid = SkyGrid::new(3).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 21);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let opts = SparseDenseOptions {
            mem_budget: Some(1000),
            ..SparseDenseOptions::default()
        };
        match solve_sparse_dense(&problem, &opts) {
            Err(Error::OutOfMemory { required, budget }) => {
                assert_eq!(budget, 1000);
                assert_eq!(required, assembled_bytes(&grid).unwrap());
            }
            other => panic!("expected out-of-memory, got {other:?}"),
        }
        let generous = SparseDenseOptions {
            mem_budget: Some(10_000_000),
            ..SparseDenseOptions::default()
        };
        assert!(solve_sparse_dense(&problem, &generous).is_ok());
    }

    #[test]
    fn forced_assembly_respects_the_size_guard() {
        let grid = SkyGrid::new(7).unwrap();
        let npix = grid.npix();
        let yhat = random_stack(npix, 2, 23);
        let shat = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let problem =
            SylvesterProblem::from_parts(&grid, yhat, shat, vec![1.0, 1.0], vec![1.0; npix])
                .unwrap();
        let opts = SparseDenseOptions {
            assembled: Some(true),
            ..SparseDenseOptions::default()
        };
        assert!(matches!(
            solve_sparse_dense(&problem, &opts),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn zero_shift_is_a_singular_pencil() {
        let grid = SkyGrid::new(2).unwrap();
        let npix = grid.npix();
        let yhat = random_stack(npix, 1, 27);
        let shat = DMatrix::from_element(1, 1, 0.0);
        let problem =
            SylvesterProblem::from_parts(&grid, yhat, shat, vec![1.0], vec![1.0; npix]).unwrap();
        assert!(matches!(
            solve_sparse_dense(&problem, &SparseDenseOptions::default()),
            Err(Error::SingularPencil(_))
        ));
    }

    #[test]
    fn inner_iteration_cap_reports_non_convergence() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix(), 2.0);
        let y = random_stack(grid.npix(), model.n(), 31);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let opts = SparseDenseOptions {
            shifted_tol: 1e-15,
            max_inner_iter: 1,
            ..SparseDenseOptions::default()
        };
        let (_, report) = solve_sparse_dense(&problem, &opts).unwrap();
        assert!(!report.converged);
    }

    #[test]
    fn agrees_with_cg_on_the_kronecker_form() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 35);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let (m_sd, _) = solve_sparse_dense(&problem, &SparseDenseOptions::default()).unwrap();

        let op = crate::operators::PosteriorOperator::new(&grid, &model).unwrap();
        let rhs = crate::model::build_rhs(&model, &y).unwrap();
        let cfg = crate::cg::CgConfig {
            tol: 1e-12,
            ..Default::default()
        };
        let (m_cg, _) = crate::cg::solve_cg(&op, &rhs, &cfg).unwrap();
        let mut diff = m_sd.clone();
        diff.axpy(-1.0, &m_cg).unwrap();
        assert!(diff.norm() <= 1e-6 * m_cg.norm());
    }
}
