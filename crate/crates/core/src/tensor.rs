//! Dense row-major `f32` matrices and the handful of kernels the engine is
//! built from.
//!
//! Every reduction accumulates in `f64` with a fixed evaluation order, and
//! every kernel is row-local (row `i` of the output depends only on row `i`
//! of the left operand). The cached and uncached execution paths rely on that
//! to agree bit for bit.

use std::fmt;

use crate::error::{contract, Result};
#[cfg(test)]
use crate::kernels::Portable;
use crate::kernels::{with_kernels, Kernels};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        contract!(
            data.len() == rows * cols,
            "buffer of {} values cannot form a {rows}x{cols} matrix",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. `cols` is needed so that an
    /// empty row list still has a width.
    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            contract!(r.len() == cols, "row {i} has {} values, expected {cols}", r.len());
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and a zero-width matrix still has rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        contract!(
            start <= end && end <= self.rows,
            "row range {start}..{end} outside 0..{}",
            self.rows
        );
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Splits into rows `[0, at)` and `[at, rows)`.
    pub fn split_rows(&self, at: usize) -> Result<(Matrix, Matrix)> {
        Ok((self.slice_rows(0, at)?, self.slice_rows(at, self.rows)?))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        contract!(
            self.rows == other.rows && self.cols == other.cols,
            "cannot diff {}x{} against {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
            .fold(0.0, f64::max))
    }
}

/// Stacks `top` above `bottom`.
pub fn concat_rows(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
    contract!(
        top.cols == bottom.cols,
        "cannot stack {} columns on {} columns",
        top.cols,
        bottom.cols
    );
    let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
    data.extend_from_slice(&top.data);
    data.extend_from_slice(&bottom.data);
    Ok(Matrix {
        rows: top.rows + bottom.rows,
        cols: top.cols,
        data,
    })
}

/// Element-wise sum.
pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    contract!(
        a.rows == b.rows && a.cols == b.cols,
        "cannot add {}x{} and {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Fixed-order dot product; see [`crate::kernels`] for the order.
#[cfg(test)]
fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    // SAFETY: portable code has no requirements.
    unsafe { Portable::dot(a, b) }
}

#[inline]
fn widen(src: &[f32], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|&v| f64::from(v)));
}

/// Right-hand operand of a product, stored transposed and widened to `f64`
/// so each output element is one contiguous dot product. Widening is exact,
/// so products against a packed operand match [`matmul`] bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedRhs {
    inner: usize,
    cols: usize,
    columns: Vec<f64>,
}

impl PackedRhs {
    pub fn new(b: &Matrix) -> Self {
        let mut columns = Vec::with_capacity(b.rows * b.cols);
        for j in 0..b.cols {
            columns.extend((0..b.rows).map(|k| f64::from(b.data[k * b.cols + j])));
        }
        Self {
            inner: b.rows,
            cols: b.cols,
            columns,
        }
    }

    pub fn inner(&self) -> usize {
        self.inner
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `a × b` where `b` is the packed operand.
    pub fn left_mul(&self, a: &Matrix) -> Result<Matrix> {
        contract!(
            a.cols == self.inner,
            "matmul dimension mismatch: {}x{} times {}x{}",
            a.rows,
            a.cols,
            self.inner,
            self.cols
        );
        let mut out = Matrix::zeros(a.rows, self.cols);
        if self.inner == 0 {
            return Ok(out);
        }
        mul_rows(&self.columns, self.inner, a, &mut out);
        Ok(out)
    }
}

/// # Safety
/// `K` must be supported by the CPU; [`with_kernels`] guarantees it.
#[inline(always)]
unsafe fn mul_rows_generic<K: Kernels>(columns: &[f64], inner: usize, a: &Matrix, out: &mut Matrix) {
    let mut row = Vec::with_capacity(inner);
    for i in 0..a.rows {
        widen(a.row(i), &mut row);
        let dst = out.row_mut(i);
        let quads = columns.chunks_exact(4 * inner);
        let rest = quads.remainder();
        let mut j = 0;
        for quad in quads {
            let (c0, r) = quad.split_at(inner);
            let (c1, r) = r.split_at(inner);
            let (c2, c3) = r.split_at(inner);
            for (o, v) in dst[j..j + 4].iter_mut().zip(unsafe { K::dot4(&row, [c0, c1, c2, c3]) }) {
                *o = v as f32;
            }
            j += 4;
        }
        for col in rest.chunks_exact(inner) {
            dst[j] = unsafe { K::dot(&row, col) } as f32;
            j += 1;
        }
    }
}

fn mul_rows(columns: &[f64], inner: usize, a: &Matrix, out: &mut Matrix) {
    with_kernels!(mul_rows_generic, mul_rows_avx2, (columns: &[f64], inner: usize, a: &Matrix, out: &mut Matrix) -> ())
}

/// Standard matrix product. Callers account `2·a.rows·a.cols·b.cols` FLOPs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    contract!(
        a.cols == b.rows,
        "matmul dimension mismatch: {}x{} times {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    PackedRhs::new(b).left_mul(a)
}

/// Numerically stable softmax over a slice, in place.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    let mut buf = Vec::with_capacity(m.cols);
    for i in 0..m.rows {
        widen(m.row(i), &mut buf);
        softmax_in_place(&mut buf);
        for (d, s) in out.row_mut(i).iter_mut().zip(&buf) {
            *d = *s as f32;
        }
    }
    out
}

/// Multi-head scaled dot-product attention with no mask and no
/// projections: each query row attends over all rows of `k`/`v`, head by
/// head. Query rows are independent. Callers account the two products.
pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    contract!(
        q.cols == k.cols && k.cols == v.cols,
        "attention widths differ (q {}, k {}, v {})",
        q.cols,
        k.cols,
        v.cols
    );
    contract!(k.rows == v.rows, "attention has {} keys but {} values", k.rows, v.rows);
    contract!(
        heads > 0 && q.cols.is_multiple_of(heads),
        "{} columns do not split into {heads} heads",
        q.cols
    );
    let mut mixed = Matrix::zeros(q.rows, q.cols);
    attend_into(q, k, v, heads, &mut mixed);
    Ok(mixed)
}

/// # Safety
/// As for [`mul_rows_generic`].
#[inline(always)]
unsafe fn attend_generic<K: Kernels>(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, mixed: &mut Matrix) {
    let d = q.cols;
    let hd = d / heads;
    let n = k.rows;
    let scale = 1.0 / (hd as f64).sqrt();
    let keys: Vec<f64> = k.data.iter().map(|&x| f64::from(x)).collect();
    let values: Vec<f64> = v.data.iter().map(|&x| f64::from(x)).collect();
    let mut query = Vec::with_capacity(d);
    let mut scores = vec![0.0f64; n];
    let mut acc = vec![0.0f64; hd];
    for i in 0..q.rows {
        widen(q.row(i), &mut query);
        for h in 0..heads {
            let lo = h * hd;
            let qh = &query[lo..lo + hd];
            let blocks = keys.chunks_exact(4 * d);
            let rest = blocks.remainder();
            let mut j = 0;
            for kb in blocks {
                let head = |r: usize| &kb[r * d + lo..r * d + lo + hd];
                let dots = unsafe { K::dot4(qh, [head(0), head(1), head(2), head(3)]) };
                for (s, x) in scores[j..j + 4].iter_mut().zip(dots) {
                    *s = x * scale;
                }
                j += 4;
            }
            for kj in rest.chunks_exact(d) {
                scores[j] = unsafe { K::dot(qh, &kj[lo..lo + hd]) } * scale;
                j += 1;
            }
            softmax_in_place(&mut scores);
            acc.fill(0.0);
            for (&p, vj) in scores.iter().zip(values.chunks_exact(d)) {
                unsafe { K::axpy(&mut acc, p, &vj[lo..lo + hd]) };
            }
            for (dst, &a) in mixed.row_mut(i)[lo..lo + hd].iter_mut().zip(&acc) {
                *dst = a as f32;
            }
        }
    }
}

fn attend_into(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, mixed: &mut Matrix) {
    with_kernels!(attend_generic, attend_avx2, (q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, mixed: &mut Matrix) -> ())
}

/// Per-row normalization to zero mean and unit variance, with no learned
/// scale or shift.
pub fn layer_norm(m: &Matrix, eps: f64) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    if m.cols == 0 {
        return out;
    }
    let n = m.cols as f64;
    for i in 0..m.rows {
        let row = m.row(i);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let c = f64::from(v) - mean;
                c * c
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, &v) in out.row_mut(i).iter_mut().zip(row) {
            *d = ((f64::from(v) - mean) * inv) as f32;
        }
    }
    out
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    (0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())) as f32
}

/// Norms below this are treated as degenerate by [`cosine_similarity`].
pub const MIN_NORM: f64 = 1e-12;

/// `uᵀv / (‖u‖‖v‖)`, clamped to `[-1, 1]`. Returns 0 when either vector has
/// (near) zero norm, so the token reads as maximally changed.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    contract!(
        u.len() == v.len(),
        "cosine similarity of vectors with lengths {} and {}",
        u.len(),
        v.len()
    );
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < MIN_NORM || nv < MIN_NORM {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn l2_distance(u: &[f32], v: &[f32]) -> Result<f64> {
    contract!(
        u.len() == v.len(),
        "l2 distance of vectors with lengths {} and {}",
        u.len(),
        v.len()
    );
    Ok(u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Checks that `idx` is strictly ascending and every entry is `< len`.
pub fn check_indices(idx: &[usize], len: usize) -> Result<()> {
    for (n, &i) in idx.iter().enumerate() {
        contract!(i < len, "row index {i} out of range for {len} rows");
        if n > 0 {
            contract!(
                idx[n - 1] < i,
                "row indices must be unique and ascending, got {} before {i}",
                idx[n - 1]
            );
        }
    }
    Ok(())
}

pub fn gather_rows(m: &Matrix, idx: &[usize]) -> Result<Matrix> {
    check_indices(idx, m.rows)?;
    let mut data = Vec::with_capacity(idx.len() * m.cols);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Ok(Matrix {
        rows: idx.len(),
        cols: m.cols,
        data,
    })
}

/// Overwrites rows `idx` of `dst` with the rows of `src`, in order.
pub fn scatter_rows_into(dst: &mut Matrix, idx: &[usize], src: &Matrix) -> Result<()> {
    check_indices(idx, dst.rows)?;
    contract!(
        src.rows == idx.len() && src.cols == dst.cols,
        "scatter source is {}x{}, expected {}x{}",
        src.rows,
        src.cols,
        idx.len(),
        dst.cols
    );
    for (n, &i) in idx.iter().enumerate() {
        dst.row_mut(i).copy_from_slice(src.row(n));
    }
    Ok(())
}

pub fn scatter_rows(dst: &Matrix, idx: &[usize], src: &Matrix) -> Result<Matrix> {
    let mut out = dst.clone();
    scatter_rows_into(&mut out, idx, src)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn m(cols: usize, rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(cols, rows).unwrap()
    }

    /// Textbook triple loop in f64, no lanes.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
            }
        }
        out
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f32..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    #[test]
    fn matmul_identity() {
        let i = m(2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(2, &[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = m(2, &[&[1.0, 2.0]]);
        let b = m(1, &[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_matches_naive_on_odd_shapes() {
        // 19 columns exercises both the lane loop and the tail.
        let a = Matrix::from_vec(3, 19, (0..57).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap();
        let b = Matrix::from_vec(19, 5, (0..95).map(|v| (v as f32 * 0.11).cos()).collect()).unwrap();
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*g) - e).abs() < 1e-5);
        }
    }

    #[test]
    fn blocked_product_matches_single_dot_bitwise() {
        let a = Matrix::from_vec(2, 19, (0..38).map(|v| (v as f32 * 0.7).sin() * 1e3).collect()).unwrap();
        let b = Matrix::from_vec(19, 7, (0..133).map(|v| (v as f32 * 1.3).cos() * 1e-3).collect()).unwrap();
        let got = matmul(&a, &b).unwrap();
        let bt = b.transpose();
        for i in 0..2 {
            let row: Vec<f64> = a.row(i).iter().map(|&x| f64::from(x)).collect();
            for j in 0..7 {
                let col: Vec<f64> = bt.row(j).iter().map(|&x| f64::from(x)).collect();
                assert_eq!(got.get(i, j).to_bits(), (dot_f64(&row, &col) as f32).to_bits());
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(2, &[&[0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&m(3, &[&[1000.0, 1000.0, 1000.0]]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }

        let s = softmax_rows(&m(2, &[&[0.0, 3.0f32.ln()]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-6);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&m(4, &[&[3.0, 3.0, 3.0, 3.0]]), 1e-5);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let out = layer_norm(&m(2, &[&[1.0, -1.0]]), 1e-5);
        assert!((out.get(0, 0) - 1.0).abs() < 1e-4);
        assert!((out.get(0, 1) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn similarity_examples() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());

        assert_eq!(l2_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(l2_distance(&[1.0], &[]).is_err());
    }

    #[test]
    fn gather_scatter_examples() {
        let base = m(1, &[&[1.0], &[2.0], &[3.0]]);
        let out = scatter_rows(&base, &[1], &m(1, &[&[9.0]])).unwrap();
        assert_eq!(out.data(), &[1.0, 9.0, 3.0]);

        assert!(gather_rows(&base, &[2, 0]).is_err());
        assert!(gather_rows(&base, &[1, 1]).is_err());
        assert!(gather_rows(&base, &[3]).is_err());
        assert!(scatter_rows(&base, &[0], &m(1, &[&[1.0], &[2.0]])).is_err());
        assert_eq!(gather_rows(&base, &[0, 2]).unwrap().data(), &[1.0, 3.0]);
    }

    fn arb_indices(len: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(any::<bool>(), len)
            .prop_map(|keep| keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect())
    }

    proptest! {
        #[test]
        fn scatter_of_gather_is_identity(
            (dst, idx) in (1usize..12, 1usize..6).prop_flat_map(|(r, c)| (arb_matrix(r, c), arb_indices(r)))
        ) {
            let back = scatter_rows(&dst, &idx, &gather_rows(&dst, &idx).unwrap()).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                dst.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn cosine_is_scale_invariant(
            u in proptest::collection::vec(-5.0f32..5.0, 8),
            v in proptest::collection::vec(-5.0f32..5.0, 8),
            alpha in 0.01f32..100.0,
            beta in 0.01f32..100.0,
        ) {
            let su: Vec<f32> = u.iter().map(|x| x * alpha).collect();
            let sv: Vec<f32> = v.iter().map(|x| x * beta).collect();
            let base = cosine_similarity(&u, &v).unwrap();
            let scaled = cosine_similarity(&su, &sv).unwrap();
            // Degenerate norms short-circuit to 0 on both sides.
            prop_assert!((base - scaled).abs() < 1e-6);
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-30.0f32..30.0, 1..16),
            shift in -50.0f32..50.0,
        ) {
            let a = softmax_rows(&Matrix::from_rows(row.len(), &[&row]).unwrap());
            let shifted: Vec<f32> = row.iter().map(|x| x + shift).collect();
            let b = softmax_rows(&Matrix::from_rows(row.len(), &[&shifted]).unwrap());
            let sum: f64 = a.data().iter().map(|&v| f64::from(v)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            // The shift itself rounds in f32; each logit moves by at most
            // `err`, which moves any probability by at most 2·err.
            let err = row
                .iter()
                .zip(&shifted)
                .map(|(&x, &y)| (f64::from(y) - (f64::from(x) + f64::from(shift))).abs())
                .fold(0.0, f64::max);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(f64::from((x - y).abs()) < 2.0 * err + 1e-6);
            }
        }

        #[test]
        fn layer_norm_rows_have_zero_mean(m in (1usize..5, 2usize..40).prop_flat_map(|(r, c)| arb_matrix(r, c))) {
            let out = layer_norm(&m, 1e-5);
            for row in out.iter_rows() {
                let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / row.len() as f64;
                prop_assert!(mean.abs() < 1e-5);
            }
        }

        #[test]
        fn matmul_is_associative(
            (a, b, c) in (1usize..5, 1usize..7, 1usize..7, 1usize..5)
                .prop_flat_map(|(r, k, l, n)| (arb_matrix(r, k), arb_matrix(k, l), arb_matrix(l, n)))
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().chain(right.data()).fold(1.0f32, |s, v| s.max(v.abs()));
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-4 * scale);
            }
        }
    }
}
