//! Reshape-based matrix-free application of Q = P⊗D², BᵀCB and the full
//! posterior precision Q̂ = Q + BᵀCB, never materializing any N·m-sized
//! matrix.
//!
//! All kernels stream over pixel chunks in a fixed order, so results are
//! bitwise reproducible regardless of thread count.

use crate::grid::SkyGrid;
use crate::model::ModelSpec;
use crate::stack::for_row_chunks_mut;
use crate::{Error, MapStack, Result};

fn check_block(model: &ModelSpec, x: &MapStack) -> Result<()> {
    x.check_rows(model.npix())?;
    if x.cols() != model.m() {
        return Err(Error::Shape(format!(
            "stack has {} columns, model has {} sources",
            x.cols(),
            model.m()
        )));
    }
    Ok(())
}

/// Q·vec(U) as a stack: column l of the output is φ_l·D²·(column l of U).
pub fn apply_q(model: &ModelSpec, grid: &SkyGrid, u: &MapStack) -> Result<MapStack> {
    let mut out = MapStack::zeros(u.rows(), u.cols());
    apply_q_into(model, grid, u, &mut out)?;
    Ok(out)
}

/// As [`apply_q`] but writing into an existing stack.
pub fn apply_q_into(
    model: &ModelSpec,
    grid: &SkyGrid,
    u: &MapStack,
    out: &mut MapStack,
) -> Result<()> {
    check_block(model, u)?;
    grid.apply_d_squared_into(u, out)?;
    out.scale_cols(model.p())?;
    Ok(())
}

/// BᵀCB·vec(X) as a stack: Nhits ⊙_rows (X·Aᵀ·T·A), fused into a single
/// chunked pass over the pixels.
pub fn apply_bt_cb(model: &ModelSpec, x: &MapStack) -> Result<MapStack> {
    let mut out = MapStack::zeros(x.rows(), x.cols());
    apply_bt_cb_into(model, x, &mut out)?;
    Ok(out)
}

/// As [`apply_bt_cb`] but writing into an existing stack.
pub fn apply_bt_cb_into(model: &ModelSpec, x: &MapStack, out: &mut MapStack) -> Result<()> {
    check_block(model, x)?;
    out.check_same_shape(x)?;
    out.fill(0.0);
    bt_cb_accumulate(model, x, out);
    Ok(())
}

/// out += BᵀCB·x. Each pixel row of x passes through the reshaped matvec
/// sequence X·Aᵀ, scaling by τ_k and the hit count, then ·A, with all m
/// outputs accumulated before moving on; one read of x and one update of
/// out regardless of the channel count.
fn bt_cb_accumulate(model: &ModelSpec, x: &MapStack, out: &mut MapStack) {
    let (n, m, npix) = (model.n(), model.m(), model.npix());
    let nhits = model.nhits();
    let tau = model.t();
    let a = model.a();
    let a_flat: Vec<f64> = (0..n)
        .flat_map(|k| (0..m).map(move |l| a[(k, l)]))
        .collect();
    let xdata = x.data();
    for_row_chunks_mut(out.columns_mut(), |start, cols| {
        let mut z = vec![0.0; n];
        for i in 0..cols[0].len() {
            let j = start + i;
            for (k, zk) in z.iter_mut().enumerate() {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += a_flat[k * m + l] * xdata[l * npix + j];
                }
                *zk = tau[k] * nhits[j] * acc;
            }
            for (l, col) in cols.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &zk) in z.iter().enumerate() {
                    acc += a_flat[k * m + l] * zk;
                }
                col[i] += acc;
            }
        }
    });
}

/// The symmetric positive-definite map x ↦ (Q + BᵀCB)x, borrowing its grid
/// and model; cheap to construct, safe to share across threads.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorOperator<'a> {
    grid: &'a SkyGrid,
    model: &'a ModelSpec,
}

impl<'a> PosteriorOperator<'a> {
    pub fn new(grid: &'a SkyGrid, model: &'a ModelSpec) -> Result<Self> {
        if grid.npix() != model.npix() {
            return Err(Error::Shape(format!(
                "grid has {} pixels, model describes {}",
                grid.npix(),
                model.npix()
            )));
        }
        Ok(Self { grid, model })
    }

    pub fn grid(&self) -> &SkyGrid {
        self.grid
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }

    pub fn npix(&self) -> usize {
        self.grid.npix()
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    /// Q̂·vec(X) as a stack.
    pub fn apply(&self, x: &MapStack) -> Result<MapStack> {
        let mut out = MapStack::zeros(x.rows(), x.cols());
        self.apply_into(x, &mut out)?;
        Ok(out)
    }

    /// As [`apply`](Self::apply) but writing into an existing stack.
    pub fn apply_into(&self, x: &MapStack, out: &mut MapStack) -> Result<()> {
        apply_q_into(self.model, self.grid, x, out)?;
        bt_cb_accumulate(self.model, x, out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand_core::{RngCore, SeedableRng};

    fn random_stack(rows: usize, cols: usize, seed: u64) -> MapStack {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
            .collect();
        MapStack::from_vec(rows, cols, data).unwrap()
    }

    fn varied_model(npix: usize) -> ModelSpec {
        ModelSpec::planck_default(npix)
            .unwrap()
            .with_nhits((0..npix).map(|j| 1.0 + (j % 3) as f64).collect())
            .unwrap()
            .with_p(vec![1.0, 0.5, 2.0, 1.25])
            .unwrap()
    }

    /// P⊗D² assembled entrywise, independent of the streaming kernels.
    fn dense_q(grid: &SkyGrid, model: &ModelSpec) -> DMatrix<f64> {
        let npix = grid.npix();
        let d = grid.dense_d().unwrap();
        let d2 = &d * &d;
        let m = model.m();
        let mut q = DMatrix::zeros(m * npix, m * npix);
        for l in 0..m {
            for j in 0..npix {
                for jp in 0..npix {
                    q[(l * npix + j, l * npix + jp)] = model.p()[l] * d2[(j, jp)];
                }
            }
        }
        q
    }

    /// BᵀCB assembled entrywise.
    fn dense_bt_cb(model: &ModelSpec) -> DMatrix<f64> {
        let npix = model.npix();
        let (n, m) = (model.n(), model.m());
        let mut out = DMatrix::zeros(m * npix, m * npix);
        for l in 0..m {
            for lp in 0..m {
                let mut s = 0.0;
                for k in 0..n {
                    s += model.a()[(k, l)] * model.t()[k] * model.a()[(k, lp)];
                }
                for j in 0..npix {
                    out[(l * npix + j, lp * npix + j)] = s * model.nhits()[j];
                }
            }
        }
        out
    }

    #[test]
    fn q_annihilates_per_source_constants() {
        let grid = SkyGrid::new(3).unwrap();
        let model = varied_model(grid.npix());
        let mut u = MapStack::zeros(grid.npix(), model.m());
        for l in 0..model.m() {
            u.col_mut(l).fill(3.0 + l as f64);
        }
        let out = apply_q(&model, &grid, &u).unwrap();
        assert!(out.max_abs() <= 1e-12 * u.max_abs() * grid.npix() as f64);
    }

    #[test]
    fn unit_prior_scales_reduce_q_to_d_squared() {
        let grid = SkyGrid::new(2).unwrap();
        let model = ModelSpec::planck_default(grid.npix()).unwrap();
        let u = random_stack(grid.npix(), model.m(), 7);
        let got = apply_q(&model, &grid, &u).unwrap();
        let want = grid.apply_d_squared(&u).unwrap();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn q_matches_dense_kronecker_assembly() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix());
        let q = dense_q(&grid, &model);
        for seed in 0..20 {
            let u = random_stack(grid.npix(), model.m(), seed);
            let got = apply_q(&model, &grid, &u).unwrap();
            let want = &q * DVector::from_column_slice(u.data());
            let scale = want.abs().max().max(1e-300);
            for i in 0..want.len() {
                assert!((got.data()[i] - want[i]).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn scalar_bt_cb_is_tau_a_squared() {
        let model = ModelSpec::new(
            vec![100.0],
            DMatrix::from_element(1, 1, 3.0),
            vec![2.0],
            vec![1.0; 8],
            vec![1.0],
            0,
        )
        .unwrap();
        let x = random_stack(8, 1, 11);
        let got = apply_bt_cb(&model, &x).unwrap();
        let mut want = x.clone();
        want.scale(2.0 * 9.0);
        assert_relative_eq!(got.to_dmatrix(), want.to_dmatrix(), max_relative = 1e-14);
    }

    #[test]
    fn bt_cb_matches_dense_kronecker_assembly() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix());
        let dense = dense_bt_cb(&model);
        for seed in 100..120 {
            let x = random_stack(grid.npix(), model.m(), seed);
            let got = apply_bt_cb(&model, &x).unwrap();
            let want = &dense * DVector::from_column_slice(x.data());
            let scale = want.abs().max().max(1e-300);
            for i in 0..want.len() {
                assert!((got.data()[i] - want[i]).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn posterior_is_sum_of_parts_and_matches_oracle() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix());
        let op = PosteriorOperator::new(&grid, &model).unwrap();
        let oracle = crate::dense::assemble_dense(&grid, &model).unwrap();
        for seed in 200..220 {
            let x = random_stack(grid.npix(), model.m(), seed);
            let got = op.apply(&x).unwrap();

            let mut parts = apply_q(&model, &grid, &x).unwrap();
            parts.axpy(1.0, &apply_bt_cb(&model, &x).unwrap()).unwrap();
            assert_relative_eq!(got.to_dmatrix(), parts.to_dmatrix(), max_relative = 1e-13);

            let want = oracle.apply(&x).unwrap();
            let scale = want.max_abs().max(1e-300);
            let mut diff = got.clone();
            diff.axpy(-1.0, &want).unwrap();
            assert!(diff.max_abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn posterior_of_zero_is_zero() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix());
        let op = PosteriorOperator::new(&grid, &model).unwrap();
        let out = op.apply(&MapStack::zeros(16, 4)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn posterior_is_symmetric_and_positive() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix());
        let op = PosteriorOperator::new(&grid, &model).unwrap();
        for seed in 0..100 {
            let x = random_stack(16, 4, seed);
            let z = random_stack(16, 4, seed + 1000);
            let qx = op.apply(&x).unwrap();
            let qz = op.apply(&z).unwrap();
            let lhs = qx.dot(&z).unwrap();
            let rhs = x.dot(&qz).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
            assert!(qx.dot(&x).unwrap() > 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let grid = SkyGrid::new(2).unwrap();
        let model = varied_model(grid.npix());
        let bad = MapStack::zeros(16, 3);
        assert!(matches!(
            apply_q(&model, &grid, &bad),
            Err(Error::Shape(_))
        ));
        assert!(matches!(apply_bt_cb(&model, &bad), Err(Error::Shape(_))));

        let other_grid = SkyGrid::new(3).unwrap();
        assert!(matches!(
            PosteriorOperator::new(&other_grid, &model),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn operators_are_linear(seed1 in 0u64..1000, seed2 in 1000u64..2000, alpha in -8.0..8.0f64) {
            let grid = SkyGrid::new(2).unwrap();
            let model = varied_model(grid.npix());
            let op = PosteriorOperator::new(&grid, &model).unwrap();
            let x = random_stack(16, 4, seed1);
            let z = random_stack(16, 4, seed2);
            let mut combo = x.clone();
            combo.scale(alpha);
            combo.axpy(1.0, &z).unwrap();

            for (got, fx, fz) in [
                (apply_q(&model, &grid, &combo).unwrap(),
                 apply_q(&model, &grid, &x).unwrap(),
                 apply_q(&model, &grid, &z).unwrap()),
                (apply_bt_cb(&model, &combo).unwrap(),
                 apply_bt_cb(&model, &x).unwrap(),
                 apply_bt_cb(&model, &z).unwrap()),
                (op.apply(&combo).unwrap(),
                 op.apply(&x).unwrap(),
                 op.apply(&z).unwrap()),
            ] {
                let mut want = fx.clone();
                want.scale(alpha);
                want.axpy(1.0, &fz).unwrap();
                let scale = want.max_abs().max(x.max_abs()).max(1e-300);
                let mut diff = got.clone();
                diff.axpy(-1.0, &want).unwrap();
                prop_assert!(diff.max_abs() <= 1e-12 * scale * grid.npix() as f64);
            }
        }
    }
}
