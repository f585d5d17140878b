//! Dense vectors and matrices plus the small set of kernels the engine needs:
//! stable softmax, cosine similarity, descending argsort.

mod rng;

use std::ops::{Deref, Range};

pub use rng::SplitMix64;

use crate::error::{invalid_arg, invalid_dim, Error, Result};
use crate::scalar::Scalar;

fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(invalid_arg(format!("{what}: non-finite entry at index {i}"))),
        None => Ok(()),
    }
}

/// A finite dense vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        check_finite(&values, "vector")?;
        Ok(Self(values))
    }

    pub fn from_slice(values: &[T]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        norm(&self.0)
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid_dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "matrix")?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(invalid_dim(format!("row {i} has length {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    /// Skips the finiteness scan; callers guarantee finite data of the right length.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Copies the block `rows × cols`.
    pub fn submatrix(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Self> {
        if rows.end > self.rows || cols.end > self.cols || rows.start > rows.end || cols.start > cols.end {
            return Err(invalid_dim(format!(
                "block [{:?}, {:?}] outside {}x{} matrix",
                rows, cols, self.rows, self.cols
            )));
        }
        let width = cols.len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows.clone() {
            data.extend_from_slice(&self.row(r)[cols.clone()]);
        }
        Ok(Self { rows: rows.len(), cols: width, data })
    }

    /// Gathers the given rows in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    /// Column-wise mean of the rows.
    pub fn mean_row(&self) -> Vector<T> {
        let mut acc = vec![T::zero(); self.cols];
        for r in self.row_iter() {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        if self.rows > 0 {
            let n = T::from_usize(self.rows).unwrap();
            acc.iter_mut().for_each(|a| *a /= n);
        }
        Vector(acc)
    }
}

#[inline]
pub fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

#[inline]
pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Numerically stable softmax of one row of logits.
pub fn softmax_row<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(invalid_dim("softmax of an empty row"));
    }
    check_finite(logits, "softmax logits")?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax; `row` must be non-empty and finite.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Cosine similarity `<u,v> / (|u| |v|)`, clamped to [-1, 1].
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(invalid_dim(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    if u.is_empty() {
        return Err(invalid_dim("cosine of empty vectors"));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::DegenerateVector("cosine with a zero-norm vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Indices ordering `scores` from highest to lowest; equal scores keep ascending index order.
pub fn argsort_desc<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Indices of the `k` highest scores (ties to the smaller index), returned ascending.
pub fn top_k_ascending<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut picked = argsort_desc(scores);
    picked.truncate(k);
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_logits() {
        let p = softmax_row(&[0.0f64; 4]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax_row(&[1000.0f64, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(p[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax_row::<f64>(&[]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn softmax_works_in_f32() {
        let p = softmax_row(&[1.0f32, 2.0, 3.0]).unwrap();
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0f64, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        let v = [0.3f64, -1.2, 4.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0f64, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector(_))));
        assert!(matches!(cosine(&[1.0f64], &[1.0, 0.0]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn argsort_examples() {
        assert_eq!(argsort_desc(&[0.3f64, 0.9, 0.1]), vec![1, 0, 2]);
        assert_eq!(argsort_desc(&[0.5f64, 0.5, 0.2]), vec![0, 1, 2]);
    }

    #[test]
    fn argsort_matches_pair_sort_oracle() {
        let mut rng = SplitMix64::new(7);
        // coarse values force plenty of ties
        let scores: Vec<f64> = (0..1000).map(|_| (rng.next_f64() * 50.0).floor()).collect();
        let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let oracle: Vec<usize> = pairs.into_iter().map(|p| p.1).collect();
        assert_eq!(argsort_desc(&scores), oracle);
    }

    #[test]
    fn vector_and_matrix_reject_non_finite() {
        assert!(Vector::new(vec![1.0f64, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0f64, f64::INFINITY]).is_err());
        assert!(matches!(Matrix::new(2, 2, vec![1.0f64; 3]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn submatrix_copies_block() {
        let m = Matrix::new(3, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        let b = m.submatrix(1..3, 0..2).unwrap();
        assert_eq!(b.as_slice(), &[3.0, 4.0, 6.0, 7.0]);
        assert!(m.submatrix(0..4, 0..1).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..64),
            rot in 0usize..64,
        ) {
            let p = softmax_row(&logits).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            let k = rot % logits.len();
            let mut rotated = logits.clone();
            rotated.rotate_left(k);
            let mut expected = p.clone();
            expected.rotate_left(k);
            for (a, b) in softmax_row(&rotated).unwrap().iter().zip(&expected) {
                prop_assert!((a - b).abs() <= 1e-14 * b.max(1e-300) + 1e-300);
            }
        }

        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..32),
            alpha in 0.01f64..100.0,
        ) {
            let u: Vec<f64> = pair.iter().map(|p| p.0).collect();
            let v: Vec<f64> = pair.iter().map(|p| p.1).collect();
            prop_assume!(norm(&u) > 1e-6 && norm(&v) > 1e-6);
            let c = cosine(&u, &v).unwrap();
            prop_assert!((c - cosine(&v, &u).unwrap()).abs() <= 1e-15);
            let scaled: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine(&scaled, &v).unwrap() - c).abs() < 1e-12);
        }

        #[test]
        fn argsort_is_a_nonincreasing_permutation(scores in prop::collection::vec(-1.0f64..1.0, 1..200)) {
            let order = argsort_desc(&scores);
            let mut seen = order.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
            prop_assert!(order.windows(2).all(|w| scores[w[0]] >= scores[w[1]]));
        }
    }
}
