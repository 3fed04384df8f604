//! Brute-force ground truth for tests: explicit assembly of Q̂ = BᵀCB + Q
//! and direct dense solution of the posterior mean system.
//!
//! Everything here is built from the Kronecker definitions with plain index
//! loops, independent of the matrix-free kernels it exists to check, and is
//! hard-guarded to small faces so it can never run at production scale.

use nalgebra::{DMatrix, DVector};

use crate::grid::SkyGrid;
use crate::model::ModelSpec;
use crate::{Error, MapStack, Result};

/// Largest system dimension m·N the oracle will assemble.
pub const MAX_DENSE_DIM: usize = 8192;

/// Explicitly assembled posterior precision with its factor shapes.
#[derive(Debug, Clone)]
pub struct DenseSystem {
    qhat: DMatrix<f64>,
    npix: usize,
    m: usize,
}

/// Assembles Q̂ = (A⊗I)ᵀ(T⊗Nhits)(A⊗I) + P⊗D² entry by entry.
pub fn assemble_dense(grid: &SkyGrid, model: &ModelSpec) -> Result<DenseSystem> {
    let npix = grid.npix();
    if model.npix() != npix {
        return Err(Error::Shape(format!(
            "model describes {} pixels, grid has {npix}",
            model.npix()
        )));
    }
    let (n, m) = (model.n(), model.m());
    let dim = m * npix;
    if dim > MAX_DENSE_DIM {
        return Err(Error::SizeGuard(format!(
            "dense oracle refused for m·N = {dim} > {MAX_DENSE_DIM}"
        )));
    }
    let d = grid.dense_d()?;
    let d2 = &d * &d;
    let a = model.a();
    let mut qhat = DMatrix::zeros(dim, dim);
    for l in 0..m {
        for lp in 0..m {
            let mut s = 0.0;
            for k in 0..n {
                s += a[(k, l)] * model.t()[k] * a[(k, lp)];
            }
            for j in 0..npix {
                qhat[(l * npix + j, lp * npix + j)] += s * model.nhits()[j];
            }
        }
        for j in 0..npix {
            for jp in 0..npix {
                qhat[(l * npix + j, l * npix + jp)] += model.p()[l] * d2[(j, jp)];
            }
        }
    }
    Ok(DenseSystem { qhat, npix, m })
}

impl DenseSystem {
    /// Wraps an explicit square matrix as an oracle system (tests only need
    /// the solve path; the same size guard applies).
    pub fn from_matrix(qhat: DMatrix<f64>, npix: usize, m: usize) -> Result<Self> {
        if qhat.nrows() != npix * m || !qhat.is_square() {
            return Err(Error::Shape(format!(
                "matrix is {}×{}, want square of dimension {}",
                qhat.nrows(),
                qhat.ncols(),
                npix * m
            )));
        }
        if npix * m > MAX_DENSE_DIM {
            return Err(Error::SizeGuard(format!(
                "dense oracle refused for m·N = {} > {MAX_DENSE_DIM}",
                npix * m
            )));
        }
        Ok(Self { qhat, npix, m })
    }

    pub fn qhat(&self) -> &DMatrix<f64> {
        &self.qhat
    }

    /// Q̂·vec(X), reshaped back to an N×m stack.
    pub fn apply(&self, x: &MapStack) -> Result<MapStack> {
        self.check_stack(x)?;
        let v = DVector::from_column_slice(x.data());
        let w = &self.qhat * v;
        MapStack::from_vec(self.npix, self.m, w.data.into())
    }

    /// Direct Cholesky solve of Q̂·vec(μ) = vec(rhs).
    pub fn solve(&self, rhs: &MapStack) -> Result<MapStack> {
        self.check_stack(rhs)?;
        let chol = nalgebra::Cholesky::new(self.qhat.clone()).ok_or(Error::Breakdown {
            iteration: 0,
            reason: "dense Cholesky failed: assembled posterior not positive definite".into(),
        })?;
        let mu = chol.solve(&DVector::from_column_slice(rhs.data()));
        MapStack::from_vec(self.npix, self.m, mu.data.into())
    }

    fn check_stack(&self, x: &MapStack) -> Result<()> {
        if x.rows() != self.npix || x.cols() != self.m {
            return Err(Error::Shape(format!(
                "stack is {}×{}, oracle wants {}×{}",
                x.rows(),
                x.cols(),
                self.npix,
                self.m
            )));
        }
        Ok(())
    }
}

/// Right-hand side reshape(BᵀC·vec(Y)) via the explicit Kronecker route,
/// sharing no code with [`crate::model::build_rhs`].
pub fn dense_rhs(model: &ModelSpec, y: &MapStack) -> Result<MapStack> {
    let npix = model.npix();
    if y.rows() != npix || y.cols() != model.n() {
        return Err(Error::Shape(format!(
            "observations are {}×{}, want {npix}×{}",
            y.rows(),
            y.cols(),
            model.n()
        )));
    }
    let (n, m) = (model.n(), model.m());
    let mut rhs = MapStack::zeros(npix, m);
    for l in 0..m {
        let col = rhs.col_mut(l);
        for j in 0..npix {
            let mut acc = 0.0;
            for k in 0..n {
                acc += model.a()[(k, l)] * model.t()[k] * y.col(k)[j];
            }
            col[j] = acc * model.nhits()[j];
        }
    }
    Ok(rhs)
}
