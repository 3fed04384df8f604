//! One sky face at refinement level h, viewed as a 2^h × 2^h four-neighbor
//! grid, and the matrix-free neighbor operator D.
//!
//! Pixels are indexed row-major. D has off-diagonal 1 for every pair of
//! edge-sharing pixels and diagonal equal to minus the number of neighbors,
//! so `D·1 = 0` and boundary pixels simply couple to their 2–3 existing
//! neighbors (no wraparound, no ghost values). The analysis of the full sky
//! is 12 independent per-face analyses, so one grid is all a solve needs.

use crate::stack::for_chunks_mut;
use crate::{Error, MapStack, Result};

/// Highest supported refinement level (side 4096, 16.7M pixels per face).
pub const MAX_LEVEL: u32 = 12;

/// One sky face: geometry plus the precomputed D-diagonal (negated neighbor
/// counts, i.e. the row sums the stencil reuses every application).
#[derive(Debug, Clone)]
pub struct SkyGrid {
    level: u32,
    side: usize,
    npix: usize,
    neighbor_counts: Vec<f64>,
}

impl SkyGrid {
    /// Builds the face at the given refinement level.
    pub fn new(level: u32) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::Config(format!(
                "level {level} out of range 0..={MAX_LEVEL}"
            )));
        }
        let side = 1usize << level;
        let npix = side * side;
        let mut neighbor_counts = vec![0.0; npix];
        for r in 0..side {
            for c in 0..side {
                let interior_r = usize::from(r > 0) + usize::from(r + 1 < side);
                let interior_c = usize::from(c > 0) + usize::from(c + 1 < side);
                neighbor_counts[r * side + c] = (interior_r + interior_c) as f64;
            }
        }
        Ok(Self {
            level,
            side,
            npix,
            neighbor_counts,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Side length 2^h of the face.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Pixel count N = 4^h.
    pub fn npix(&self) -> usize {
        self.npix
    }

    /// Number of edge-sharing neighbors of pixel `j` (2, 3 or 4; 0 only at
    /// level 0 where the face is a single pixel).
    pub fn neighbor_count(&self, j: usize) -> usize {
        self.neighbor_counts[j] as usize
    }

    /// The neighbors of pixel `j`, sorted ascending.
    pub fn neighbors(&self, j: usize) -> Result<Vec<usize>> {
        if j >= self.npix {
            return Err(Error::Argument(format!(
                "pixel index {j} out of range for {} pixels",
                self.npix
            )));
        }
        let (side, r, c) = (self.side, j / self.side, j % self.side);
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push(j - side);
        }
        if c > 0 {
            out.push(j - 1);
        }
        if c + 1 < side {
            out.push(j + 1);
        }
        if r + 1 < side {
            out.push(j + side);
        }
        Ok(out)
    }

    /// Applies D to every column of `v`: out(j) = Σ_{j'∈nbrs(j)} v(j') − |nbrs(j)|·v(j).
    pub fn apply_d(&self, v: &MapStack) -> Result<MapStack> {
        let mut out = MapStack::zeros(v.rows(), v.cols());
        self.apply_d_into(v, &mut out)?;
        Ok(out)
    }

    /// As [`apply_d`](Self::apply_d) but writing into an existing stack.
    pub fn apply_d_into(&self, v: &MapStack, out: &mut MapStack) -> Result<()> {
        v.check_rows(self.npix)?;
        out.check_same_shape(v)?;
        for l in 0..v.cols() {
            // Split borrows: `out` columns are disjoint from the input.
            let src = v.col(l);
            self.stencil_col(src, out.col_mut(l));
        }
        Ok(())
    }

    /// Applies D² (two stencil sweeps through a single scratch column).
    pub fn apply_d_squared(&self, v: &MapStack) -> Result<MapStack> {
        let mut out = MapStack::zeros(v.rows(), v.cols());
        self.apply_d_squared_into(v, &mut out)?;
        Ok(out)
    }

    /// As [`apply_d_squared`](Self::apply_d_squared) but writing into an existing stack.
    pub fn apply_d_squared_into(&self, v: &MapStack, out: &mut MapStack) -> Result<()> {
        v.check_rows(self.npix)?;
        out.check_same_shape(v)?;
        let mut tmp = vec![0.0; self.npix];
        for l in 0..v.cols() {
            self.stencil_col(v.col(l), &mut tmp);
            self.stencil_col(&tmp, out.col_mut(l));
        }
        Ok(())
    }

    /// One stencil sweep over a single column; each output pixel is a pure
    /// function of the input, so chunked parallelism is deterministic.
    fn stencil_col(&self, v: &[f64], out: &mut [f64]) {
        let side = self.side;
        let counts = &self.neighbor_counts;
        for_chunks_mut(out, |start, oc| {
            for (i, o) in oc.iter_mut().enumerate() {
                let j = start + i;
                let r = j / side;
                let c = j - r * side;
                let mut acc = -counts[j] * v[j];
                if r > 0 {
                    acc += v[j - side];
                }
                if c > 0 {
                    acc += v[j - 1];
                }
                if c + 1 < side {
                    acc += v[j + 1];
                }
                if r + 1 < side {
                    acc += v[j + side];
                }
                *o = acc;
            }
        });
    }

    /// Dense assembly of D for oracle use; guarded to small faces.
    pub fn dense_d(&self) -> Result<nalgebra::DMatrix<f64>> {
        if self.npix > 4096 {
            return Err(Error::SizeGuard(format!(
                "dense D refused for N = {} > 4096",
                self.npix
            )));
        }
        let mut d = nalgebra::DMatrix::zeros(self.npix, self.npix);
        for j in 0..self.npix {
            d[(j, j)] = -self.neighbor_counts[j];
            for nb in self.neighbors(j)? {
                d[(j, nb)] = 1.0;
            }
        }
        Ok(d)
    }
}
