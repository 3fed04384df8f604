//! Column-major N×k map blocks and the deterministic data-parallel kernels
//! every solver is built from.
//!
//! A [`MapStack`] stores k sky maps of N pixels each in one contiguous
//! column-major buffer, so `reshape(u, N, k)` is a zero-copy
//! reinterpretation: `vectorize(reshape(u)) = u` on storage.
//!
//! All kernels are deterministic regardless of thread count: elementwise and
//! stencil operations write disjoint outputs as pure per-element functions,
//! and reductions accumulate fixed-size chunks that are folded sequentially in
//! index order. The `parallel` feature only changes who computes each chunk,
//! never the arithmetic, so parallel and sequential builds produce bitwise
//! identical results.

use nalgebra::DMatrix;

use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed reduction-chunk length (elements). Chunk boundaries define the
/// summation tree, so this constant is part of the numerical contract.
pub(crate) const CHUNK: usize = 8192;

/// Inputs shorter than this run sequentially even in parallel builds; the
/// dispatch overhead would otherwise dominate small-level timings.
const PAR_MIN: usize = 16384;

/// Applies `f(start_index, chunk)` over fixed-size mutable chunks of `data`.
pub(crate) fn for_chunks_mut<F>(data: &mut [f64], f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    #[cfg(feature = "parallel")]
    if data.len() >= PAR_MIN {
        data.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(i, c)| f(i * CHUNK, c));
        return;
    }
    for (i, c) in data.chunks_mut(CHUNK).enumerate() {
        f(i * CHUNK, c);
    }
}

/// Applies `f(start_row, per_column_chunks)` over fixed-size row chunks of
/// a set of equally long column slices, so a kernel can update every column
/// of a stack in one pass over the pixels. Chunk boundaries follow [`CHUNK`].
pub(crate) fn for_row_chunks_mut<F>(cols: Vec<&mut [f64]>, f: F)
where
    F: Fn(usize, &mut [&mut [f64]]) + Sync,
{
    let rows = cols.first().map_or(0, |c| c.len());
    let total = rows * cols.len();
    let mut col_chunks: Vec<_> = cols.into_iter().map(|c| c.chunks_mut(CHUNK)).collect();
    let mut groups: Vec<(usize, Vec<&mut [f64]>)> = Vec::with_capacity(rows.div_ceil(CHUNK));
    for i in 0..rows.div_ceil(CHUNK) {
        let group = col_chunks
            .iter_mut()
            .map(|it| it.next().expect("equal column lengths"))
            .collect();
        groups.push((i * CHUNK, group));
    }
    #[cfg(feature = "parallel")]
    if total >= PAR_MIN {
        groups
            .par_iter_mut()
            .for_each(|(start, group)| f(*start, group));
        return;
    }
    let _ = total;
    for (start, group) in groups.iter_mut() {
        f(*start, group);
    }
}

/// Maps `f(start, end)` over fixed-size index ranges covering `0..len`,
/// returning the per-chunk results in chunk order.
pub(crate) fn map_chunks<R, F>(len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, usize) -> R + Sync,
{
    let n_chunks = len.div_ceil(CHUNK);
    let range = |i: usize| (i * CHUNK, ((i + 1) * CHUNK).min(len));
    #[cfg(feature = "parallel")]
    if len >= PAR_MIN {
        return (0..n_chunks)
            .into_par_iter()
            .map(|i| {
                let (a, b) = range(i);
                f(a, b)
            })
            .collect();
    }
    (0..n_chunks)
        .map(|i| {
            let (a, b) = range(i);
            f(a, b)
        })
        .collect()
}

/// Ordered chunked sum of `f` evaluated elementwise; the fold over chunk
/// partials is always sequential.
fn sum_chunks<F>(len: usize, f: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    map_chunks(len, f).into_iter().sum()
}

/// A stack of k equal-length sky maps, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MapStack {
    /// All-zero stack with `rows` pixels per map and `cols` maps.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wraps an existing column-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} stack",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// The underlying column-major buffer (`vectorize` is the identity).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Immutable view of column `j`.
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Mutable view of column `j`.
    pub(crate) fn columns_mut(&mut self) -> Vec<&mut [f64]> {
        if self.rows == 0 {
            return Vec::new();
        }
        self.data.chunks_mut(self.rows).collect()
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn fill(&mut self, value: f64) {
        for_chunks_mut(&mut self.data, |_, c| c.fill(value));
    }

    pub fn copy_from(&mut self, other: &MapStack) -> Result<()> {
        self.check_same_shape(other)?;
        self.data.copy_from_slice(&other.data);
        Ok(())
    }

    /// `self *= alpha`.
    pub fn scale(&mut self, alpha: f64) {
        for_chunks_mut(&mut self.data, |_, c| {
            for v in c {
                *v *= alpha;
            }
        });
    }

    /// `self += alpha · x`.
    pub fn axpy(&mut self, alpha: f64, x: &MapStack) -> Result<()> {
        self.check_same_shape(x)?;
        let xs = &x.data;
        for_chunks_mut(&mut self.data, |start, c| {
            let len = c.len();
            for (o, v) in c.iter_mut().zip(&xs[start..start + len]) {
                *o += alpha * v;
            }
        });
        Ok(())
    }

    /// `self = x + beta · self` (one-pass update used by CG's direction step).
    pub fn xpay(&mut self, beta: f64, x: &MapStack) -> Result<()> {
        self.check_same_shape(x)?;
        let xs = &x.data;
        for_chunks_mut(&mut self.data, |start, c| {
            let len = c.len();
            for (o, v) in c.iter_mut().zip(&xs[start..start + len]) {
                *o = v + beta * *o;
            }
        });
        Ok(())
    }

    /// Frobenius inner product `⟨self, other⟩` over all entries.
    pub fn dot(&self, other: &MapStack) -> Result<f64> {
        self.check_same_shape(other)?;
        let (a, b) = (&self.data, &other.data);
        Ok(sum_chunks(a.len(), |s, e| {
            a[s..e].iter().zip(&b[s..e]).map(|(x, y)| x * y).sum()
        }))
    }

    /// Frobenius norm over all entries.
    pub fn norm(&self) -> f64 {
        self.dot(self).expect("same shape").sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        map_chunks(self.data.len(), |s, e| {
            self.data[s..e].iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// Squared Frobenius norm with optional per-row and per-column weights:
    /// `Σ_l cw_l · Σ_j rw_j · self[j,l]²`.
    pub fn weighted_norm_sq(&self, row_w: Option<&[f64]>, col_w: Option<&[f64]>) -> Result<f64> {
        if let Some(w) = row_w {
            self.check_rows(w.len())?;
        }
        if let Some(w) = col_w {
            if w.len() != self.cols {
                return Err(Error::Shape(format!(
                    "column-weight length {} != cols {}",
                    w.len(),
                    self.cols
                )));
            }
        }
        let mut total = 0.0;
        for l in 0..self.cols {
            let col = self.col(l);
            let part = sum_chunks(self.rows, |s, e| match row_w {
                Some(w) => col[s..e]
                    .iter()
                    .zip(&w[s..e])
                    .map(|(x, wj)| wj * x * x)
                    .sum(),
                None => col[s..e].iter().map(|x| x * x).sum(),
            });
            total += col_w.map_or(1.0, |w| w[l]) * part;
        }
        Ok(total)
    }

    /// Multiplies each row `j` by `w[j]`.
    pub fn scale_rows(&mut self, w: &[f64]) -> Result<()> {
        self.check_rows(w.len())?;
        for l in 0..self.cols {
            let rows = self.rows;
            let col = &mut self.data[l * rows..(l + 1) * rows];
            for_chunks_mut(col, |start, c| {
                let len = c.len();
                for (v, wj) in c.iter_mut().zip(&w[start..start + len]) {
                    *v *= wj;
                }
            });
        }
        Ok(())
    }

    /// Multiplies each column `l` by `w[l]`.
    pub fn scale_cols(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.cols {
            return Err(Error::Shape(format!(
                "column-weight length {} != cols {}",
                w.len(),
                self.cols
            )));
        }
        for (l, &wl) in w.iter().enumerate() {
            let rows = self.rows;
            let col = &mut self.data[l * rows..(l + 1) * rows];
            for_chunks_mut(col, |_, c| {
                for v in c {
                    *v *= wl;
                }
            });
        }
        Ok(())
    }

    /// `self · s` for a small `cols×p` matrix `s`.
    pub fn mul_small(&self, s: &DMatrix<f64>) -> Result<MapStack> {
        let mut out = MapStack::zeros(self.rows, s.ncols());
        self.mul_small_into(s, 1.0, 0.0, &mut out)?;
        Ok(out)
    }

    /// `self += alpha · x · s`.
    pub fn add_mul_small(&mut self, x: &MapStack, s: &DMatrix<f64>, alpha: f64) -> Result<()> {
        x.mul_small_into(s, alpha, 1.0, self)
    }

    /// `out = alpha · self · s + beta · out`, streaming one output column at a
    /// time so the kernel stays BLAS-3-like without temporaries.
    pub fn mul_small_into(
        &self,
        s: &DMatrix<f64>,
        alpha: f64,
        beta: f64,
        out: &mut MapStack,
    ) -> Result<()> {
        if s.nrows() != self.cols {
            return Err(Error::Shape(format!(
                "stack has {} columns but multiplier has {} rows",
                self.cols,
                s.nrows()
            )));
        }
        if out.rows != self.rows || out.cols != s.ncols() {
            return Err(Error::Shape(format!(
                "output is {}x{}, expected {}x{}",
                out.rows,
                out.cols,
                self.rows,
                s.ncols()
            )));
        }
        let n = self.rows;
        let k = self.cols;
        for c in 0..s.ncols() {
            let coeffs: Vec<f64> = (0..k).map(|kk| alpha * s[(kk, c)]).collect();
            let x = &self.data;
            let out_col = &mut out.data[c * n..(c + 1) * n];
            for_chunks_mut(out_col, |start, oc| {
                if beta == 0.0 {
                    oc.fill(0.0);
                } else if beta != 1.0 {
                    for v in oc.iter_mut() {
                        *v *= beta;
                    }
                }
                for (kk, &sc) in coeffs.iter().enumerate() {
                    if sc == 0.0 {
                        continue;
                    }
                    let xs = &x[kk * n + start..kk * n + start + oc.len()];
                    for (o, v) in oc.iter_mut().zip(xs) {
                        *o += sc * v;
                    }
                }
            });
        }
        Ok(())
    }

    /// `self ← self · R⁻¹` for a small upper-triangular `R`, via a forward
    /// column sweep. Used by the weighted block QR and by the two-pass basis
    /// regeneration, which must repeat the exact same arithmetic.
    pub fn solve_upper_right_in_place(&mut self, r: &DMatrix<f64>) -> Result<()> {
        if r.nrows() != self.cols || !r.is_square() {
            return Err(Error::Shape(format!(
                "triangular factor is {}x{}, stack has {} columns",
                r.nrows(),
                r.ncols(),
                self.cols
            )));
        }
        let n = self.rows;
        for l in 0..self.cols {
            let (head, tail) = self.data.split_at_mut(l * n);
            let col_l = &mut tail[..n];
            for k in 0..l {
                let coef = r[(k, l)];
                if coef == 0.0 {
                    continue;
                }
                let col_k = &head[k * n..(k + 1) * n];
                for_chunks_mut(col_l, |start, c| {
                    let len = c.len();
                    for (o, v) in c.iter_mut().zip(&col_k[start..start + len]) {
                        *o -= coef * v;
                    }
                });
            }
            let diag = r[(l, l)];
            if diag == 0.0 || !diag.is_finite() {
                return Err(Error::Breakdown {
                    iteration: 0,
                    reason: format!("triangular factor has invalid diagonal {diag} in column {l}"),
                });
            }
            let inv = 1.0 / diag;
            for_chunks_mut(col_l, |_, c| {
                for v in c {
                    *v *= inv;
                }
            });
        }
        Ok(())
    }

    /// Small Gram product `selfᵀ · diag(row_w) · other` (cols × other.cols).
    pub fn gram(&self, other: &MapStack, row_w: Option<&[f64]>) -> Result<DMatrix<f64>> {
        if other.rows != self.rows {
            return Err(Error::Shape(format!(
                "row counts differ: {} vs {}",
                self.rows, other.rows
            )));
        }
        if let Some(w) = row_w {
            self.check_rows(w.len())?;
        }
        let (k, kp, n) = (self.cols, other.cols, self.rows);
        let partials = map_chunks(n, |s, e| {
            let mut g = DMatrix::zeros(k, kp);
            for j in s..e {
                let wj = row_w.map_or(1.0, |w| w[j]);
                for a in 0..k {
                    let xa = wj * self.data[a * n + j];
                    for b in 0..kp {
                        g[(a, b)] += xa * other.data[b * n + j];
                    }
                }
            }
            g
        });
        let mut total = DMatrix::zeros(k, kp);
        for p in partials {
            total += p;
        }
        Ok(total)
    }

    /// Copies into a dense `nalgebra` matrix (layouts agree, both column-major).
    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, &self.data)
    }

    /// Builds a stack from a dense matrix.
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &MapStack) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "stacks are {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub(crate) fn check_rows(&self, expected: usize) -> Result<()> {
        if self.rows != expected {
            return Err(Error::Shape(format!(
                "stack has {} rows, expected {}",
                self.rows, expected
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn counting_stack(rows: usize, cols: usize) -> MapStack {
        MapStack::from_vec(rows, cols, (0..rows * cols).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn reshape_is_zero_copy() {
        let s = counting_stack(4, 3);
        assert_eq!(s.col(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(s.data()[5], 5.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(MapStack::from_vec(3, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a = counting_stack(100, 2);
        let b = counting_stack(100, 2);
        let naive: f64 = a.data().iter().map(|v| v * v).sum();
        assert_relative_eq!(a.dot(&b).unwrap(), naive, max_relative = 1e-14);
    }

    #[test]
    fn dot_is_chunk_order_deterministic() {
        // Longer than one chunk so the ordered fold actually engages.
        let n = 3 * CHUNK + 17;
        let a = counting_stack(n, 1);
        let d1 = a.dot(&a).unwrap();
        let d2 = a.dot(&a).unwrap();
        assert_eq!(d1.to_bits(), d2.to_bits());
    }

    #[test]
    fn mul_small_matches_dense() {
        let x = counting_stack(7, 3);
        let s = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.25 - 0.5);
        let got = x.mul_small(&s).unwrap().to_dmatrix();
        let want = x.to_dmatrix() * &s;
        assert_relative_eq!(got, want, max_relative = 1e-14);
    }

    #[test]
    fn gram_matches_dense() {
        let x = counting_stack(9, 2);
        let y = counting_stack(9, 3);
        let w: Vec<f64> = (0..9).map(|j| 1.0 + j as f64 * 0.1).collect();
        let got = x.gram(&y, Some(&w)).unwrap();
        let wd = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(w));
        let want = x.to_dmatrix().transpose() * wd * y.to_dmatrix();
        assert_relative_eq!(got, want, max_relative = 1e-14);
    }

    #[test]
    fn xpay_updates_in_one_pass() {
        let x = counting_stack(5, 1);
        let mut p = counting_stack(5, 1);
        p.xpay(0.5, &x).unwrap();
        for j in 0..5 {
            assert_relative_eq!(p.col(0)[j], 1.5 * j as f64);
        }
    }

    #[test]
    fn triangular_solve_inverts_right_multiplication() {
        let v = counting_stack(6, 3);
        let r = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.5, -1.0, 0.0, 1.5, 0.25, 0.0, 0.0, 0.75],
        );
        let mut w = MapStack::from_dmatrix(&(v.to_dmatrix() * &r));
        w.solve_upper_right_in_place(&r).unwrap();
        assert_relative_eq!(w.to_dmatrix(), v.to_dmatrix(), max_relative = 1e-13);

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let mut x = counting_stack(4, 2);
        assert!(x.solve_upper_right_in_place(&singular).is_err());
    }

    #[test]
    fn weighted_norm_reduces_to_frobenius() {
        let x = counting_stack(6, 2);
        let plain = x.weighted_norm_sq(None, None).unwrap();
        assert_relative_eq!(plain.sqrt(), x.norm(), max_relative = 1e-15);
        let ones = vec![1.0; 6];
        let w = x.weighted_norm_sq(Some(&ones), Some(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(w, plain, max_relative = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = counting_stack(4, 2);
        let b = counting_stack(5, 2);
        assert!(matches!(a.dot(&b), Err(Error::Shape(_))));
    }
}
