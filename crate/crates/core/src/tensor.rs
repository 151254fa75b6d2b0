//! Dense row-major matrices and the handful of statistics kernels the rest of
//! the engine is built on.
//!
//! Matrix products go through `matrixmultiply::dgemm`, which takes arbitrary
//! row/column strides, so transposed operands and row blocks are views rather
//! than copies.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::from_vec(r.rows, r.cols, r.data)
    }
}

/// Borrowed strided view of a matrix, possibly transposed.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a> {
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
    data: &'a [f64],
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn view(&self) -> MatView<'_> {
        MatView {
            rows: self.rows,
            cols: self.cols,
            row_stride: self.cols as isize,
            col_stride: 1,
            data: &self.data,
        }
    }

    /// View of a contiguous block of rows.
    pub fn row_block(&self, range: Range<usize>) -> MatView<'_> {
        assert!(range.start <= range.end && range.end <= self.rows);
        MatView {
            rows: range.len(),
            cols: self.cols,
            row_stride: self.cols as isize,
            col_stride: 1,
            data: &self.data[range.start * self.cols..range.end * self.cols],
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        self.view().matmul(other.view())
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        self.view().matmul(other.view().t())
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        self.view().t().matmul(other.view())
    }

    /// Elementwise map into a new matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} added to {} columns",
                bias.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }
}

impl<'a> MatView<'a> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn t(self) -> MatView<'a> {
        MatView {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            data: self.data,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_stride as usize + j * self.col_stride as usize]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    pub fn matmul(self, other: MatView<'_>) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, other, 0.0, &mut out)?;
        Ok(out)
    }
}

/// `c ← alpha·a·b + beta·c`.
pub fn gemm(alpha: f64, a: MatView<'_>, b: MatView<'_>, beta: f64, c: &mut Matrix) -> Result<()> {
    if a.cols != b.rows || c.rows != a.rows || c.cols != b.cols {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{} into {}x{}",
            a.rows, a.cols, b.rows, b.cols, c.rows, c.cols
        )));
    }
    if c.data.is_empty() {
        return Ok(());
    }
    if a.cols == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return Ok(());
    }
    // SAFETY: the shape checks above guarantee every strided access stays
    // inside the borrowed slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("L2 norm of an empty vector".into()));
    }
    Ok(v.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Median of a multiset of counts; even cardinalities average the two middle
/// order statistics.
pub fn percentile_50(xs: &[usize]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Domain("median of an empty multiset".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] as f64 + sorted[mid] as f64) / 2.0
    })
}

/// Exponential running mean. Empty until the first observation, which it
/// adopts as-is; afterwards `value ← smoothing·value + (1 − smoothing)·x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ema {
    value: Option<f64>,
    smoothing: f64,
    updates: u64,
}

impl Ema {
    pub fn new(smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing < 1.0) {
            return Err(Error::Domain(format!(
                "EMA smoothing must lie in (0, 1), got {smoothing}"
            )));
        }
        Ok(Self {
            value: None,
            smoothing,
            updates: 0,
        })
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Number of observations folded in so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn update(&mut self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::Domain(format!("EMA observation {x} is not finite")));
        }
        let next = match self.value {
            None => x,
            Some(v) => self.smoothing * v + (1.0 - self.smoothing) * x,
        };
        self.value = Some(next);
        self.updates += 1;
        Ok(next)
    }
}

/// Arithmetic mean and sample standard deviation (`n − 1` denominator; zero
/// for a single value).
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Domain("mean of an empty sample".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0))
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn identity_product() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = RngState::new(7);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-14, "{x} vs {y}");
        }
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = RngState::new(8);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let c = random_matrix(&mut rng, 5, 2);
        let abt = a.matmul_t(&b).unwrap();
        let atc = a.t_matmul(&c).unwrap();
        let abt_ref = naive_matmul(&a, &b.transpose());
        let atc_ref = naive_matmul(&a.transpose(), &c);
        for (x, y) in abt.as_slice().iter().zip(abt_ref.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in atc.as_slice().iter().zip(atc_ref.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn row_block_product() {
        let mut rng = RngState::new(9);
        let a = random_matrix(&mut rng, 6, 3);
        let b = random_matrix(&mut rng, 6, 2);
        let got = a.row_block(2..5).t().matmul(b.row_block(2..5)).unwrap();
        let want = naive_matmul(
            &a.gather_rows(&[2, 3, 4]).transpose(),
            &b.gather_rows(&[2, 3, 4]),
        );
        for (x, y) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
        assert!(matches!(Matrix::from_vec(2, 2, vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn l2_norm_cases() {
        assert_eq!(l2_norm(&[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(l2_norm(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn l2_norm_matches_summation_oracle() {
        let mut rng = RngState::new(11);
        let v: Vec<f64> = (0..100).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
        let mut acc = 0.0;
        for x in &v {
            acc += x.powi(2);
        }
        assert!(rel_close(l2_norm(&v).unwrap(), acc.sqrt(), 1e-12));
    }

    #[test]
    fn median_cases() {
        assert_eq!(percentile_50(&[5]).unwrap(), 5.0);
        assert_eq!(percentile_50(&[1, 2, 3, 4]).unwrap(), 2.5);
        assert_eq!(percentile_50(&[7, 1, 3]).unwrap(), 3.0);
        assert!(matches!(percentile_50(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn ema_cases() {
        let mut e = Ema::new(0.9).unwrap();
        assert_eq!(e.update(2.0).unwrap(), 2.0);

        let mut e = Ema::new(0.9).unwrap();
        e.update(1.0).unwrap();
        assert!((e.update(2.0).unwrap() - 1.1).abs() < 1e-15);

        let mut e = Ema::new(0.9).unwrap();
        for _ in 0..100 {
            e.update(3.25).unwrap();
        }
        assert_eq!(e.value(), Some(3.25));
        assert_eq!(e.updates(), 100);

        assert!(e.update(f64::NAN).is_err());
        assert!(Ema::new(1.0).is_err());
        assert!(Ema::new(0.0).is_err());
    }

    #[test]
    fn ema_geometric_convergence() {
        // v0 = 1.0, c = 0.0: the distance after k updates is 0.9^k.
        let mut e = Ema::new(0.9).unwrap();
        e.update(1.0).unwrap();
        let mut expected = 1.0f64;
        for _ in 0..50 {
            e.update(0.0).unwrap();
            expected *= 0.9;
            assert_eq!(e.value().unwrap(), expected);
        }
    }

    #[test]
    fn mean_std_cases() {
        let (m, s) = mean_std(&[0.9, 0.9, 0.9]).unwrap();
        assert!((m - 0.9).abs() < 1e-15 && s.abs() < 1e-15);
        let (m, s) = mean_std(&[0.8, 1.0]).unwrap();
        assert!((m - 0.9).abs() < 1e-15);
        assert!((s - 0.02f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
            let mut rng = RngState::new(seed);
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, l);
            let c = random_matrix(&mut rng, l, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.as_slice().iter().chain(right.as_slice()).fold(1.0f64, |acc, v| acc.max(v.abs()));
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn l2_norm_is_homogeneous(v in prop::collection::vec(-1e3f64..1e3, 1..64), alpha in -1e3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| alpha * x).collect();
            let lhs = l2_norm(&scaled).unwrap();
            let rhs = alpha.abs() * l2_norm(&v).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(rhs) + 1e-300);
        }

        #[test]
        fn median_is_permutation_invariant_and_bounded(mut xs in prop::collection::vec(0usize..10_000, 1..50), seed in any::<u64>()) {
            let before = percentile_50(&xs).unwrap();
            let mut rng = RngState::new(seed);
            rng.shuffle(&mut xs);
            let after = percentile_50(&xs).unwrap();
            prop_assert_eq!(before, after);
            let lo = *xs.iter().min().unwrap() as f64;
            let hi = *xs.iter().max().unwrap() as f64;
            prop_assert!(lo <= after && after <= hi);
        }
    }
}
