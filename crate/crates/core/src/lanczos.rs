//! Block-Lanczos solver for the generalized Sylvester form of the posterior
//! mean system: N⁻¹D²·M + M·Ŝ = Ŷ with Ŝ = AᵀTAP⁻¹ and Ŷ = Y·T·A·P⁻¹.
//!
//! The coefficient H = N⁻¹D² is self-adjoint in the hit-count inner product
//! ⟨x, y⟩_N = yᵀ·diag(N)·x, and Ŝ is self-adjoint in ⟨·,·⟩_{P⁻¹}, so a block
//! Lanczos process in the N-inner product builds an orthonormal basis 𝒱_j of
//! the block Krylov space of H started at Ŷ, the Galerkin-projected problem
//! is a small block-tridiagonal Sylvester equation T_j Z + Z Ŝ = E₁B₀ solved
//! through a double eigendecomposition, and a residual estimate √γ is
//! available from the projected quantities alone. A second Lanczos pass
//! regenerates the basis from the stored recurrence blocks to assemble
//! M = Σ_i V_i G_i, so only three basis-sized blocks (plus the output) are
//! ever resident.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::grid::SkyGrid;
use crate::model::ModelSpec;
use crate::report::{Method, PhaseTimes, SolveReport};
use crate::{Error, MapStack, Result};

/// Drift level (relative to the candidate block's weighted norm) above which
/// one re-orthogonalization pass against V_cur and V_old is applied.
pub const REORTH_THRESHOLD: f64 = 1e-8;

/// The Sylvester-form problem data derived from a model and observations.
#[derive(Debug, Clone)]
pub struct SylvesterProblem<'a> {
    grid: &'a SkyGrid,
    yhat: MapStack,
    shat: DMatrix<f64>,
    p: Vec<f64>,
    n_weights: Vec<f64>,
    ninv_weights: Vec<f64>,
}

impl<'a> SylvesterProblem<'a> {
    /// Derives Ŷ = Y·T·A·P⁻¹ and Ŝ = AᵀTA·P⁻¹ from the model and the N×n
    /// observation stack.
    pub fn new(grid: &'a SkyGrid, model: &ModelSpec, y: &MapStack) -> Result<Self> {
        if model.npix() != grid.npix() {
            return Err(Error::Shape(format!(
                "model describes {} pixels, grid has {}",
                model.npix(),
                grid.npix()
            )));
        }
        y.check_rows(grid.npix())?;
        if y.cols() != model.n() {
            return Err(Error::Shape(format!(
                "observations have {} columns, model has {} channels",
                y.cols(),
                model.n()
            )));
        }
        let mut tap = model.a().clone();
        for k in 0..model.n() {
            for l in 0..model.m() {
                tap[(k, l)] *= model.t()[k] / model.p()[l];
            }
        }
        let yhat = y.mul_small(&tap)?;
        let mut shat = model.at_t_a();
        for i in 0..model.m() {
            for j in 0..model.m() {
                shat[(i, j)] /= model.p()[j];
            }
        }
        Self::from_parts(grid, yhat, shat, model.p().to_vec(), model.nhits().to_vec())
    }

    /// Assembles a problem from explicit parts (mainly for tests); validates
    /// shapes, weight positivity and the P⁻¹-self-adjointness of Ŝ.
    pub fn from_parts(
        grid: &'a SkyGrid,
        yhat: MapStack,
        shat: DMatrix<f64>,
        p: Vec<f64>,
        n_weights: Vec<f64>,
    ) -> Result<Self> {
        yhat.check_rows(grid.npix())?;
        let m = yhat.cols();
        if shat.nrows() != m || shat.ncols() != m || p.len() != m {
            return Err(Error::Shape(format!(
                "Shat is {}x{} and P has length {}, want {m}x{m} and {m}",
                shat.nrows(),
                shat.ncols(),
                p.len()
            )));
        }
        if n_weights.len() != grid.npix() {
            return Err(Error::Shape(format!(
                "{} hit-count weights for {} pixels",
                n_weights.len(),
                grid.npix()
            )));
        }
        for (name, vals) in [("P", &p), ("N", &n_weights)] {
            if vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} weights must be strictly positive and finite"
                )));
            }
        }
        let mut pinv_shat = shat.clone();
        for i in 0..m {
            for j in 0..m {
                pinv_shat[(i, j)] /= p[i];
            }
        }
        let asym = (&pinv_shat - pinv_shat.transpose()).amax();
        if asym > 1e-12 * pinv_shat.amax().max(f64::MIN_POSITIVE) {
            return Err(Error::Config(format!(
                "Shat is not self-adjoint in the P⁻¹ inner product (defect {asym:.3e})"
            )));
        }
        let ninv_weights = n_weights.iter().map(|w| 1.0 / w).collect();
        Ok(Self {
            grid,
            yhat,
            shat,
            p,
            n_weights,
            ninv_weights,
        })
    }

    pub fn grid(&self) -> &SkyGrid {
        self.grid
    }

    /// The right-hand-side block Ŷ.
    pub fn yhat(&self) -> &MapStack {
        &self.yhat
    }

    /// The small coefficient Ŝ.
    pub fn shat(&self) -> &DMatrix<f64> {
        &self.shat
    }

    /// Prior scales φ_l (diagonal of P).
    pub fn p(&self) -> &[f64] {
        &self.p
    }

    /// Hit-count weights n_j defining the inner product.
    pub fn n_weights(&self) -> &[f64] {
        &self.n_weights
    }

    pub fn npix(&self) -> usize {
        self.yhat.rows()
    }

    pub fn m(&self) -> usize {
        self.yhat.cols()
    }

    /// out = H·v = N⁻¹D²·v.
    pub fn apply_h_into(&self, v: &MapStack, out: &mut MapStack) -> Result<()> {
        self.grid.apply_d_squared_into(v, out)?;
        out.scale_rows(&self.ninv_weights)
    }

    /// H·v, allocating the output.
    pub fn apply_h(&self, v: &MapStack) -> Result<MapStack> {
        let mut out = MapStack::zeros(v.rows(), v.cols());
        self.apply_h_into(v, &mut out)?;
        Ok(out)
    }

    /// The explicit Sylvester residual H·M + M·Ŝ − Ŷ (allocates one block;
    /// oracle use in tests).
    pub fn residual(&self, m_sol: &MapStack) -> Result<MapStack> {
        let mut r = self.apply_h(m_sol)?;
        r.add_mul_small(m_sol, &self.shat, 1.0)?;
        r.axpy(-1.0, &self.yhat)?;
        Ok(r)
    }
}

/// A symmetric (or inner-product-symmetric) eigendecomposition: `vectors`
/// holds eigenvectors by column, `values` the matching eigenvalues.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

fn sym_eigen(mat: DMatrix<f64>) -> SymEigen {
    let sym = (&mat + mat.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    SymEigen {
        vectors: eig.eigenvectors,
        values: eig.eigenvalues,
    }
}

/// Eigendecomposition of Ŝ through the diagonal symmetrization
/// P^{-1/2}·Ŝ·P^{1/2}: returns U = P^{1/2}·Ũ with UᵀP⁻¹U = I and the real
/// eigenvalues ρ.
pub fn p_inner_eigen(shat: &DMatrix<f64>, p: &[f64]) -> Result<SymEigen> {
    let m = shat.nrows();
    if shat.ncols() != m || p.len() != m {
        return Err(Error::Shape(format!(
            "Shat is {}x{}, P has length {}",
            shat.nrows(),
            shat.ncols(),
            p.len()
        )));
    }
    let mut sym = shat.clone();
    for i in 0..m {
        for j in 0..m {
            sym[(i, j)] *= (p[j] / p[i]).sqrt();
        }
    }
    let mut eig = sym_eigen(sym);
    for i in 0..m {
        let s = p[i].sqrt();
        for j in 0..m {
            eig.vectors[(i, j)] *= s;
        }
    }
    Ok(eig)
}

enum QrOutcome {
    /// The whole block is numerically zero relative to the recurrence scale:
    /// the Krylov space is exhausted (lucky breakdown).
    Lucky,
    /// The two triangular factors of the Cholesky-QR2 sweep, composed as
    /// R = r2·r1.
    Factors { r1: DMatrix<f64>, r2: DMatrix<f64> },
}

fn cholesky_upper(gram: DMatrix<f64>, iteration: usize) -> Result<DMatrix<f64>> {
    let sym = (&gram + gram.transpose()) * 0.5;
    nalgebra::Cholesky::new(sym)
        .map(|c| c.l().transpose())
        .ok_or_else(|| Error::Breakdown {
            iteration,
            reason: "rank-deficient block: weighted Gram matrix is not positive definite".into(),
        })
}

/// In-place weighted QR via two Gram–Cholesky passes (Cholesky-QR2). The
/// second pass restores orthonormality to machine level even when the first
/// Gram matrix is ill-conditioned; the composed R = r2·r1 keeps a
/// nonnegative diagonal.
fn weighted_qr_in_place(
    w: &mut MapStack,
    weights: &[f64],
    lucky_tol: f64,
    iteration: usize,
) -> Result<QrOutcome> {
    let gram = w.gram(w, Some(weights))?;
    let diag_max = (0..gram.nrows()).fold(0.0f64, |acc, i| acc.max(gram[(i, i)]));
    if diag_max <= lucky_tol * lucky_tol {
        return Ok(QrOutcome::Lucky);
    }
    let r1 = cholesky_upper(gram, iteration)?;
    w.solve_upper_right_in_place(&r1)?;
    let gram2 = w.gram(w, Some(weights))?;
    let r2 = cholesky_upper(gram2, iteration)?;
    w.solve_upper_right_in_place(&r2)?;
    Ok(QrOutcome::Factors { r1, r2 })
}

/// Factors W = V·R with Vᵀ·diag(weights)·V = I and R upper-triangular with
/// nonnegative diagonal; a numerically rank-deficient W is a breakdown.
pub fn weighted_block_qr(w: &MapStack, weights: &[f64]) -> Result<(MapStack, DMatrix<f64>)> {
    w.check_rows(weights.len())?;
    if weights.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Argument(
            "QR weights must be strictly positive and finite".into(),
        ));
    }
    let mut v = w.clone();
    match weighted_qr_in_place(&mut v, weights, 0.0, 0)? {
        QrOutcome::Lucky => Err(Error::Breakdown {
            iteration: 0,
            reason: "cannot orthogonalize an identically zero block".into(),
        }),
        QrOutcome::Factors { r1, r2 } => Ok((v, r2 * r1)),
    }
}

/// The rolling state of the block Lanczos process: the two resident basis
/// blocks, the recurrence blocks B₀…B_{i+1} and H₁…H_i, and everything the
/// second pass needs to replay the recurrence verbatim.
#[derive(Debug, Clone)]
pub struct LanczosState {
    v_cur: MapStack,
    v_old: MapStack,
    w: MapStack,
    b_blocks: Vec<DMatrix<f64>>,
    h_blocks: Vec<DMatrix<f64>>,
    qr_factors: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    corrections: Vec<Option<(DMatrix<f64>, Option<DMatrix<f64>>)>>,
    iteration: usize,
    scale: f64,
}

impl LanczosState {
    /// Orthogonalizes the starting block Ŷ = V₁·B₀ in the N-inner product.
    pub fn new(problem: &SylvesterProblem<'_>) -> Result<Self> {
        let (npix, m) = (problem.npix(), problem.m());
        let mut v_cur = problem.yhat().clone();
        match weighted_qr_in_place(&mut v_cur, problem.n_weights(), 0.0, 0)? {
            QrOutcome::Lucky => Err(Error::Breakdown {
                iteration: 0,
                reason: "right-hand-side block is identically zero".into(),
            }),
            QrOutcome::Factors { r1, r2 } => Ok(Self {
                v_cur,
                v_old: MapStack::zeros(npix, m),
                w: MapStack::zeros(npix, m),
                b_blocks: vec![&r2 * &r1],
                h_blocks: Vec::new(),
                qr_factors: vec![(r1, r2)],
                corrections: Vec::new(),
                iteration: 0,
                scale: 0.0,
            }),
        }
    }

    fn empty(npix: usize, m: usize) -> Self {
        Self {
            v_cur: MapStack::zeros(npix, m),
            v_old: MapStack::zeros(npix, m),
            w: MapStack::zeros(npix, m),
            b_blocks: vec![DMatrix::zeros(m, m)],
            h_blocks: Vec::new(),
            qr_factors: Vec::new(),
            corrections: Vec::new(),
            iteration: 0,
            scale: 0.0,
        }
    }

    /// The newest basis block V_{i+1} (V₁ before any step).
    pub fn v_cur(&self) -> &MapStack {
        &self.v_cur
    }

    /// The previous basis block; all zeros before the first rotation.
    pub fn v_old(&self) -> &MapStack {
        &self.v_old
    }

    /// B₀ followed by B₂…B_{i+1} (B_{k+1} at index k ≥ 1).
    pub fn b_blocks(&self) -> &[DMatrix<f64>] {
        &self.b_blocks
    }

    /// H₁…H_i.
    pub fn h_blocks(&self) -> &[DMatrix<f64>] {
        &self.h_blocks
    }

    /// Completed Lanczos steps.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Assembles the jm×jm block-tridiagonal T_j from the stored blocks.
    pub fn tridiagonal(&self) -> Result<DMatrix<f64>> {
        let j = self.iteration;
        if j == 0 {
            return Err(Error::Argument(
                "no Lanczos steps taken; T_j is empty".into(),
            ));
        }
        let m = self.b_blocks[0].nrows();
        let mut t = DMatrix::zeros(j * m, j * m);
        for i in 0..j {
            t.view_mut((i * m, i * m), (m, m)).copy_from(&self.h_blocks[i]);
            if i + 1 < j {
                let b = &self.b_blocks[i + 1];
                t.view_mut(((i + 1) * m, i * m), (m, m)).copy_from(b);
                t.view_mut((i * m, (i + 1) * m), (m, m))
                    .copy_from(&b.transpose());
            }
        }
        Ok(t)
    }
}

/// One block Lanczos step: W ← H·V_i, subtract V_{i−1}B_iᵀ and V_iH_i,
/// re-orthogonalize if drift exceeds [`REORTH_THRESHOLD`], then weighted QR.
/// Returns true on lucky breakdown (Krylov space exhausted; B_{i+1} = 0 and
/// no new basis block is produced).
pub fn lanczos_step(problem: &SylvesterProblem<'_>, state: &mut LanczosState) -> Result<bool> {
    lanczos_step_timed(problem, state, &mut PhaseTimes::default())
}

fn lanczos_step_timed(
    problem: &SylvesterProblem<'_>,
    state: &mut LanczosState,
    phases: &mut PhaseTimes,
) -> Result<bool> {
    let i = state.iteration + 1;
    let weights = problem.n_weights();
    let m = problem.m();

    let t = Instant::now();
    problem.apply_h_into(&state.v_cur, &mut state.w)?;
    phases.d_apply += t.elapsed().as_secs_f64();

    let t = Instant::now();
    if i >= 2 {
        let b_i_t = state.b_blocks[i - 1].transpose();
        state.w.add_mul_small(&state.v_old, &b_i_t, -1.0)?;
    }
    let h_i = state.v_cur.gram(&state.w, Some(weights))?;
    state.w.add_mul_small(&state.v_cur, &h_i, -1.0)?;

    let c_cur = state.v_cur.gram(&state.w, Some(weights))?;
    let c_old = if i >= 2 {
        Some(state.v_old.gram(&state.w, Some(weights))?)
    } else {
        None
    };
    let drift = c_cur
        .amax()
        .max(c_old.as_ref().map_or(0.0, |c| c.amax()));
    let w_scale = state
        .w
        .weighted_norm_sq(Some(weights), None)?
        .sqrt();
    let correction = if w_scale > 0.0 && drift > REORTH_THRESHOLD * w_scale {
        state.w.add_mul_small(&state.v_cur, &c_cur, -1.0)?;
        if let Some(c) = &c_old {
            state.w.add_mul_small(&state.v_old, c, -1.0)?;
        }
        Some((c_cur, c_old))
    } else {
        None
    };
    state.corrections.push(correction);
    state.scale = state.scale.max(h_i.amax());
    state.h_blocks.push(h_i);
    let lucky_tol = 1e-12 * state.scale;
    phases.orthogonalization += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let outcome = weighted_qr_in_place(&mut state.w, weights, lucky_tol, i)?;
    let lucky = match outcome {
        QrOutcome::Lucky => {
            state.b_blocks.push(DMatrix::zeros(m, m));
            true
        }
        QrOutcome::Factors { r1, r2 } => {
            let b_next = &r2 * &r1;
            state.scale = state.scale.max(b_next.amax());
            state.b_blocks.push(b_next);
            state.qr_factors.push((r1, r2));
            std::mem::swap(&mut state.v_old, &mut state.v_cur);
            std::mem::swap(&mut state.v_cur, &mut state.w);
            false
        }
    };
    state.iteration = i;
    phases.orthogonalization += t.elapsed().as_secs_f64();
    Ok(lucky)
}

/// F with F_kl = (QᵀE₁B₀U)_kl / (φ_k + ρ_l); the denominators are guarded
/// against a singular pencil, which cannot occur for an SPD posterior.
fn projected_coefficients(
    q: &DMatrix<f64>,
    phi: &DVector<f64>,
    s_eig: &SymEigen,
    b0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let m = b0.nrows();
    let mut f = q.rows(0, m).transpose() * b0 * &s_eig.vectors;
    let guard = (1e-14 * phi.amax().max(s_eig.values.amax())).max(f64::MIN_POSITIVE);
    for k in 0..f.nrows() {
        for l in 0..f.ncols() {
            let denom = phi[k] + s_eig.values[l];
            if denom.abs() < guard {
                return Err(Error::SingularPencil(format!(
                    "eigenvalue pair φ = {} and ρ = {} leaves the projected system singular",
                    phi[k], s_eig.values[l]
                )));
            }
            f[(k, l)] /= denom;
        }
    }
    Ok(f)
}

fn gamma_from(t_eig: &SymEigen, f: &DMatrix<f64>, b_next: &DMatrix<f64>) -> f64 {
    let jm = t_eig.vectors.nrows();
    let m = b_next.nrows();
    let g = t_eig.vectors.rows(jm - m, m) * f;
    (b_next * g).norm_squared()
}

/// Solves the projected equation T_j·Z + Z·Ŝ = E₁B₀ by the double
/// eigendecomposition, returning Z = Q·F·Uᵀ·P⁻¹ (jm×m).
pub fn solve_projected(
    t_j: &DMatrix<f64>,
    shat: &DMatrix<f64>,
    b0: &DMatrix<f64>,
    p: &[f64],
) -> Result<DMatrix<f64>> {
    let m = b0.nrows();
    if !t_j.is_square() || t_j.nrows() < m || b0.ncols() != m {
        return Err(Error::Shape(format!(
            "projected system is {}x{} with a {}x{} starting block",
            t_j.nrows(),
            t_j.ncols(),
            b0.nrows(),
            b0.ncols()
        )));
    }
    let t_eig = sym_eigen(t_j.clone());
    let s_eig = p_inner_eigen(shat, p)?;
    let f = projected_coefficients(&t_eig.vectors, &t_eig.values, &s_eig, b0)?;
    let mut z = &t_eig.vectors * f * s_eig.vectors.transpose();
    for r in 0..z.nrows() {
        for l in 0..m {
            z[(r, l)] /= p[l];
        }
    }
    Ok(z)
}

/// The scalar residual estimate γ: √γ equals the (N, P)-weighted Frobenius
/// norm of the true Sylvester residual of the iterate that the stored
/// projected quantities define.
pub fn residual_estimate(
    state: &LanczosState,
    t_eig: &SymEigen,
    s_eig: &SymEigen,
    b0: &DMatrix<f64>,
) -> Result<f64> {
    if state.iteration == 0 {
        return Err(Error::Argument(
            "residual estimate requires at least one Lanczos step".into(),
        ));
    }
    let f = projected_coefficients(&t_eig.vectors, &t_eig.values, s_eig, b0)?;
    let b_next = state.b_blocks.last().expect("nonempty after a step");
    Ok(gamma_from(t_eig, &f, b_next))
}

/// Stopping and instrumentation controls for [`solve_sylvester`].
#[derive(Debug, Clone, Copy)]
pub struct SylvesterOptions {
    /// Convergence threshold ε on √γ ≤ ε·‖B₀‖_F.
    pub tol: f64,
    /// Maximum Lanczos steps; defaults to ⌈N/m⌉, the dimension bound.
    pub max_iter: Option<usize>,
    pub record_history: bool,
    /// Retain every generated basis block (test mode; breaks the memory
    /// contract on purpose so structure checks can see the full 𝒱_j).
    pub keep_basis: bool,
}

impl Default for SylvesterOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
            record_history: false,
            keep_basis: false,
        }
    }
}

/// A solved Sylvester system with everything tests may want to inspect.
#[derive(Debug, Clone)]
pub struct SylvesterSolution {
    pub solution: MapStack,
    pub report: SolveReport,
    pub state: LanczosState,
    /// The jm×m coefficient block Z_j; G_i is its i-th m×m row block.
    pub z: DMatrix<f64>,
    /// All generated basis blocks V₁…V_j when `keep_basis` was set.
    pub basis: Option<Vec<MapStack>>,
}

/// Two-pass block-Lanczos solve; returns the solution stack and report.
pub fn solve_sylvester(
    problem: &SylvesterProblem<'_>,
    opts: &SylvesterOptions,
) -> Result<(MapStack, SolveReport)> {
    let sol = solve_sylvester_full(problem, opts)?;
    Ok((sol.solution, sol.report))
}

/// As [`solve_sylvester`] but returning the full [`SylvesterSolution`].
pub fn solve_sylvester_full(
    problem: &SylvesterProblem<'_>,
    opts: &SylvesterOptions,
) -> Result<SylvesterSolution> {
    if !(opts.tol > 0.0) || !opts.tol.is_finite() {
        return Err(Error::Config(format!(
            "Sylvester tolerance must be positive and finite, got {}",
            opts.tol
        )));
    }
    if opts.max_iter == Some(0) {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    let start = Instant::now();
    let mut phases = PhaseTimes::default();
    let (npix, m) = (problem.npix(), problem.m());
    let max_iter = opts.max_iter.unwrap_or_else(|| npix.div_ceil(m)).max(1);
    let t = Instant::now();
    let yhat_fro = problem.yhat().norm();
    phases.orthogonalization += t.elapsed().as_secs_f64();

    if yhat_fro == 0.0 {
        return Ok(SylvesterSolution {
            solution: MapStack::zeros(npix, m),
            report: SolveReport {
                method: Method::LanczosSylvester,
                converged: true,
                iterations: 0,
                rel_residual: 0.0,
                weighted_rel_residual: Some(0.0),
                wall_time_s: start.elapsed().as_secs_f64(),
                history: opts.record_history.then(Vec::new),
                peak_mem_bytes: (4 * npix * m + npix) as u64 * 8,
                peak_blocks: 4,
                phases,
            },
            state: LanczosState::empty(npix, m),
            z: DMatrix::zeros(0, m),
            basis: opts.keep_basis.then(Vec::new),
        });
    }

    let t = Instant::now();
    let mut state = LanczosState::new(problem)?;
    phases.orthogonalization += t.elapsed().as_secs_f64();
    let b0_fro = state.b_blocks[0].norm();

    let t = Instant::now();
    let s_eig = p_inner_eigen(problem.shat(), problem.p())?;
    phases.small_dense += t.elapsed().as_secs_f64();

    let mut basis = opts.keep_basis.then(|| vec![state.v_cur.clone()]);
    let mut history = Vec::new();

    let (converged, z) = loop {
        let lucky = lanczos_step_timed(problem, &mut state, &mut phases)?;

        let t = Instant::now();
        let t_eig = sym_eigen(state.tridiagonal()?);
        let f = projected_coefficients(&t_eig.vectors, &t_eig.values, &s_eig, &state.b_blocks[0])?;
        let gamma = gamma_from(&t_eig, &f, state.b_blocks.last().expect("nonempty"));
        let rel = gamma.max(0.0).sqrt() / b0_fro;
        history.push(rel);
        let done = lucky || rel <= opts.tol || state.iteration >= max_iter;
        if done {
            let mut zz = &t_eig.vectors * f * s_eig.vectors.transpose();
            for r in 0..zz.nrows() {
                for l in 0..m {
                    zz[(r, l)] /= problem.p()[l];
                }
            }
            phases.small_dense += t.elapsed().as_secs_f64();
            break (lucky || rel <= opts.tol, zz);
        }
        phases.small_dense += t.elapsed().as_secs_f64();
        if let Some(b) = &mut basis {
            b.push(state.v_cur.clone());
        }
    };

    let j = state.iteration;

    // Pass 2: replay the recurrence from the stored blocks, accumulating
    // M = Σ V_i·G_i with the same three rotating buffers plus the output.
    let t = Instant::now();
    let mut m_out = MapStack::zeros(npix, m);
    state.v_cur.copy_from(problem.yhat())?;
    let (r1, r2) = &state.qr_factors[0];
    state.v_cur.solve_upper_right_in_place(r1)?;
    state.v_cur.solve_upper_right_in_place(r2)?;
    phases.orthogonalization += t.elapsed().as_secs_f64();

    for i in 1..=j {
        let t = Instant::now();
        let g_i = z.rows((i - 1) * m, m).into_owned();
        m_out.add_mul_small(&state.v_cur, &g_i, 1.0)?;
        phases.orthogonalization += t.elapsed().as_secs_f64();
        if i == j {
            break;
        }
        let t = Instant::now();
        problem.apply_h_into(&state.v_cur, &mut state.w)?;
        phases.d_apply += t.elapsed().as_secs_f64();

        let t = Instant::now();
        if i >= 2 {
            let b_i_t = state.b_blocks[i - 1].transpose();
            state.w.add_mul_small(&state.v_old, &b_i_t, -1.0)?;
        }
        state.w.add_mul_small(&state.v_cur, &state.h_blocks[i - 1], -1.0)?;
        if let Some((c_cur, c_old)) = &state.corrections[i - 1] {
            state.w.add_mul_small(&state.v_cur, c_cur, -1.0)?;
            if let Some(c) = c_old {
                state.w.add_mul_small(&state.v_old, c, -1.0)?;
            }
        }
        let (r1, r2) = &state.qr_factors[i];
        state.w.solve_upper_right_in_place(r1)?;
        state.w.solve_upper_right_in_place(r2)?;
        std::mem::swap(&mut state.v_old, &mut state.v_cur);
        std::mem::swap(&mut state.v_cur, &mut state.w);
        phases.orthogonalization += t.elapsed().as_secs_f64();
    }

    // Explicitly recomputed residual, reusing the workspace block.
    let t = Instant::now();
    problem.apply_h_into(&m_out, &mut state.w)?;
    phases.d_apply += t.elapsed().as_secs_f64();
    let t = Instant::now();
    state.w.add_mul_small(&m_out, problem.shat(), 1.0)?;
    state.w.axpy(-1.0, problem.yhat())?;
    let rel_residual = state.w.norm() / yhat_fro;
    let weighted_rel_residual = state
        .w
        .weighted_norm_sq(Some(problem.n_weights()), Some(problem.p()))?
        .sqrt()
        / b0_fro;
    phases.orthogonalization += t.elapsed().as_secs_f64();

    let jm = j * m;
    let small_bytes = (3 * jm * jm + 4 * jm * m + 6 * j * m * m + 10 * m * m) as u64 * 8;
    let basis_blocks = basis.as_ref().map_or(0, Vec::len);
    let report = SolveReport {
        method: Method::LanczosSylvester,
        converged,
        iterations: j,
        rel_residual,
        weighted_rel_residual: Some(weighted_rel_residual),
        wall_time_s: start.elapsed().as_secs_f64(),
        history: opts.record_history.then(|| history.clone()),
        peak_mem_bytes: ((4 + basis_blocks) * npix * m + npix) as u64 * 8 + small_bytes,
        peak_blocks: 4 + basis_blocks,
        phases,
    };
    Ok(SylvesterSolution {
        solution: m_out,
        report,
        state,
        z,
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
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

    fn weighted_dot(x: &MapStack, y: &MapStack, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for l in 0..x.cols() {
            for j in 0..x.rows() {
                acc += w[j] * x.col(l)[j] * y.col(l)[j];
            }
        }
        acc
    }

    #[test]
    fn lemma1_h_is_self_adjoint_in_the_n_inner_product() {
        for level in 1..=3u32 {
            let grid = SkyGrid::new(level).unwrap();
            let model = varied_model(grid.npix(), 10.0);
            let y = random_stack(grid.npix(), model.n(), level as u64);
            let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
            let x = random_stack(grid.npix(), 4, 100 + level as u64);
            let z = random_stack(grid.npix(), 4, 200 + level as u64);
            let hx = problem.apply_h(&x).unwrap();
            let hz = problem.apply_h(&z).unwrap();
            let lhs = weighted_dot(&hx, &z, problem.n_weights());
            let rhs = weighted_dot(&x, &hz, problem.n_weights());
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn lemma2_shat_is_p_inverse_self_adjoint_with_nonnegative_real_spectrum() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 3);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();

        let eig = p_inner_eigen(problem.shat(), problem.p()).unwrap();
        let rho_max = eig.values.amax();
        for l in 0..4 {
            assert!(eig.values[l] >= -1e-12 * rho_max);
        }
        let mut upu = eig.vectors.transpose() * &eig.vectors;
        for i in 0..4 {
            for j in 0..4 {
                upu[(i, j)] = (0..4)
                    .map(|k| eig.vectors[(k, i)] * eig.vectors[(k, j)] / problem.p()[k])
                    .sum();
            }
        }
        let defect = (&upu - DMatrix::identity(4, 4)).amax();
        assert!(defect <= 1e-12, "UᵀP⁻¹U defect {defect:.3e}");

        let recon = &eig.vectors
            * DMatrix::from_diagonal(&eig.values)
            * eig.vectors.transpose()
            * DMatrix::from_diagonal(&DVector::from_iterator(
                4,
                problem.p().iter().map(|p| 1.0 / p),
            ));
        assert_relative_eq!(recon, problem.shat().clone(), max_relative = 1e-10);
    }

    #[test]
    fn qr_of_an_orthonormal_block_is_identity() {
        let n = 16;
        let weights = vec![1.0; n];
        let mut w = MapStack::zeros(n, 2);
        w.col_mut(0)[3] = 1.0;
        w.col_mut(1)[7] = 1.0;
        let (v, r) = weighted_block_qr(&w, &weights).unwrap();
        assert_relative_eq!(v.to_dmatrix(), w.to_dmatrix(), max_relative = 1e-14);
        assert_relative_eq!(r, DMatrix::identity(2, 2), max_relative = 1e-14);
    }

    #[test]
    fn qr_of_single_column_recovers_its_norm() {
        let n = 9;
        let weights = vec![1.0; n];
        let mut w = MapStack::zeros(n, 1);
        w.col_mut(0)[4] = 3.0;
        let (_, r) = weighted_block_qr(&w, &weights).unwrap();
        assert_relative_eq!(r[(0, 0)], 3.0, max_relative = 1e-14);
    }

    #[test]
    fn qr_reconstructs_and_orthonormalizes_random_blocks() {
        let n = 64;
        let weights: Vec<f64> = (0..n).map(|j| 1.0 + (j % 5) as f64).collect();
        let w = random_stack(n, 4, 31);
        let (v, r) = weighted_block_qr(&w, &weights).unwrap();

        let recon = v.mul_small(&r).unwrap();
        let mut diff = recon.clone();
        diff.axpy(-1.0, &w).unwrap();
        assert!(diff.norm() <= 1e-12 * w.norm());

        let gram = v.gram(&v, Some(&weights)).unwrap();
        assert!((gram - DMatrix::identity(4, 4)).amax() <= 1e-12);
        for l in 0..4 {
            assert!(r[(l, l)] >= 0.0);
        }
    }

    #[test]
    fn qr_rejects_rank_deficient_blocks() {
        let n = 32;
        let weights = vec![1.0; n];
        let mut w = random_stack(n, 3, 7);
        let dup: Vec<f64> = w.col(0).to_vec();
        w.col_mut(2).copy_from_slice(&dup);
        assert!(matches!(
            weighted_block_qr(&w, &weights),
            Err(Error::Breakdown { .. })
        ));
        let zero = MapStack::zeros(n, 2);
        assert!(matches!(
            weighted_block_qr(&zero, &weights),
            Err(Error::Breakdown { .. })
        ));
    }

    #[test]
    fn lanczos_relation_holds_after_one_step() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 11);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let mut state = LanczosState::new(&problem).unwrap();
        let v1 = state.v_cur().clone();
        let lucky = lanczos_step(&problem, &mut state).unwrap();
        assert!(!lucky);
        let v2 = state.v_cur().clone();

        let h1 = &state.h_blocks()[0];
        let asym = (h1 - h1.transpose()).amax();
        assert!(asym <= 1e-10 * h1.amax());

        // H·V₁ = V₁·H₁ + V₂·B₂
        let mut want = problem.apply_h(&v1).unwrap();
        want.add_mul_small(&v1, h1, -1.0).unwrap();
        want.add_mul_small(&v2, &state.b_blocks()[1], -1.0).unwrap();
        let scale = problem.apply_h(&v1).unwrap().norm();
        assert!(want.norm() <= 1e-10 * scale, "relation defect {}", want.norm());

        let weights = problem.n_weights();
        let g11 = v2.gram(&v2, Some(weights)).unwrap();
        assert!((g11 - DMatrix::identity(4, 4)).amax() <= 1e-10);
        let g10 = v2.gram(&v1, Some(weights)).unwrap();
        assert!(g10.amax() <= 1e-10);
    }

    #[test]
    fn projected_scalar_solve_is_direct_division() {
        let t = DMatrix::from_element(1, 1, 2.0);
        let s = DMatrix::from_element(1, 1, 3.0);
        let b0 = DMatrix::from_element(1, 1, 7.0);
        let z = solve_projected(&t, &s, &b0, &[1.0]).unwrap();
        assert_relative_eq!(z[(0, 0)], 7.0 / 5.0, max_relative = 1e-14);
    }

    #[test]
    fn projected_diagonal_solve_divides_entrywise() {
        let t = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 4.0]));
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 3.0, 6.0]));
        let b0 = random_stack(3, 3, 5).to_dmatrix();
        let z = solve_projected(&t, &s, &b0, &[1.0, 1.0, 1.0]).unwrap();
        for k in 0..3 {
            for l in 0..3 {
                assert_relative_eq!(
                    z[(k, l)],
                    b0[(k, l)] / (t[(k, k)] + s[(l, l)]),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn projected_solve_satisfies_the_equation_by_substitution() {
        let mt = random_stack(6, 6, 41).to_dmatrix();
        let t = &mt * mt.transpose() + DMatrix::identity(6, 6) * 0.1;
        let p = vec![1.0, 0.5, 2.0, 1.25];
        let mg = random_stack(4, 4, 42).to_dmatrix();
        let g = &mg * mg.transpose() + DMatrix::identity(4, 4) * 0.1;
        let mut s = g.clone();
        for i in 0..4 {
            for j in 0..4 {
                s[(i, j)] = p[i] * g[(i, j)];
            }
        }
        let b0 = random_stack(4, 4, 43).to_dmatrix();

        let z = solve_projected(&t, &s, &b0, &p).unwrap();
        let mut resid = &t * &z + &z * &s;
        for k in 0..4 {
            for l in 0..4 {
                resid[(k, l)] -= b0[(k, l)];
            }
        }
        assert!(resid.amax() <= 1e-10 * b0.norm());
    }

    #[test]
    fn singular_pencil_is_detected() {
        let t = DMatrix::from_element(1, 1, 1.0);
        let s = DMatrix::from_element(1, 1, -1.0);
        let b0 = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            solve_projected(&t, &s, &b0, &[1.0]),
            Err(Error::SingularPencil(_))
        ));
    }

    #[test]
    fn exhausting_the_space_at_h1_is_a_clean_lucky_breakdown() {
        let grid = SkyGrid::new(1).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 19);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let sol = solve_sylvester_full(&problem, &SylvesterOptions::default()).unwrap();
        assert!(sol.report.converged);
        assert_eq!(sol.report.iterations, 1);
        let hist_rel = sol.state.b_blocks().last().unwrap().amax();
        assert_eq!(hist_rel, 0.0);
        assert!(sol.report.rel_residual <= 1e-10);
    }

    #[test]
    fn zero_rhs_returns_zero_immediately() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = MapStack::zeros(grid.npix(), model.n());
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let (m_sol, report) = solve_sylvester(&problem, &SylvesterOptions::default()).unwrap();
        assert_eq!(m_sol.max_abs(), 0.0);
        assert_eq!(report.iterations, 0);
        assert!(report.converged);
    }

    #[test]
    fn gamma_estimate_matches_explicit_residual_iteration_by_iteration() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix(), 2.0);
        let y = random_stack(grid.npix(), model.n(), 23);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        for cap in 1..=3 {
            let opts = SylvesterOptions {
                tol: 1e-30,
                max_iter: Some(cap),
                record_history: true,
                ..SylvesterOptions::default()
            };
            let sol = solve_sylvester_full(&problem, &opts).unwrap();
            assert_eq!(sol.report.iterations, cap);
            let estimated = *sol.report.history.as_ref().unwrap().last().unwrap();
            let explicit = sol.report.weighted_rel_residual.unwrap();
            assert!(estimated >= 0.0);
            assert_relative_eq!(estimated, explicit, max_relative = 1e-6);
        }
    }

    #[test]
    fn solution_matches_cg_and_dense_oracle_at_h3() {
        let grid = SkyGrid::new(3).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 29);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let opts = SylvesterOptions {
            tol: 1e-10,
            ..SylvesterOptions::default()
        };
        let (m_lanczos, report) = solve_sylvester(&problem, &opts).unwrap();
        assert!(report.converged);

        let op = crate::operators::PosteriorOperator::new(&grid, &model).unwrap();
        let rhs = crate::model::build_rhs(&model, &y).unwrap();
        let cfg = crate::cg::CgConfig {
            tol: 1e-12,
            ..Default::default()
        };
        let (m_cg, _) = crate::cg::solve_cg(&op, &rhs, &cfg).unwrap();
        let mut diff = m_lanczos.clone();
        diff.axpy(-1.0, &m_cg).unwrap();
        assert!(diff.norm() <= 1e-6 * m_cg.norm());

        let oracle = crate::dense::assemble_dense(&grid, &model).unwrap();
        let exact = oracle.solve(&rhs).unwrap();
        let mut diff = m_lanczos.clone();
        diff.axpy(-1.0, &exact).unwrap();
        assert!(diff.norm() <= 1e-6 * exact.norm());
    }

    #[test]
    fn two_pass_assembly_matches_retained_basis() {
        let grid = SkyGrid::new(3).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 37);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let opts = SylvesterOptions {
            tol: 1e-9,
            keep_basis: true,
            ..SylvesterOptions::default()
        };
        let sol = solve_sylvester_full(&problem, &opts).unwrap();
        let basis = sol.basis.as_ref().unwrap();
        assert_eq!(basis.len(), sol.report.iterations);

        let m = problem.m();
        let mut from_basis = MapStack::zeros(problem.npix(), m);
        for (i, v) in basis.iter().enumerate() {
            let g = sol.z.rows(i * m, m).into_owned();
            from_basis.add_mul_small(v, &g, 1.0).unwrap();
        }
        let mut diff = from_basis.clone();
        diff.axpy(-1.0, &sol.solution).unwrap();
        assert!(diff.norm() <= 1e-10 * sol.solution.norm());
    }

    #[test]
    fn memory_contract_reports_four_blocks() {
        let grid = SkyGrid::new(3).unwrap();
        let model = varied_model(grid.npix(), 10.0);
        let y = random_stack(grid.npix(), model.n(), 43);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let (_, report) = solve_sylvester(&problem, &SylvesterOptions::default()).unwrap();
        assert_eq!(report.peak_blocks, 4);
    }

    #[test]
    fn max_iter_exhaustion_is_reported_not_fatal() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix(), 2.0);
        let y = random_stack(grid.npix(), model.n(), 47);
        let problem = SylvesterProblem::new(&grid, &model, &y).unwrap();
        let opts = SylvesterOptions {
            tol: 1e-30,
            max_iter: Some(2),
            ..SylvesterOptions::default()
        };
        let (_, report) = solve_sylvester(&problem, &opts).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 2);
        assert!(report.rel_residual > 0.0);
    }
}
