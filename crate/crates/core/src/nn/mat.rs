use super::Scalar;

/// Dense row-major matrix. Token batches are `tokens x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn add(&self, other: &Mat<T>) -> Mat<T> {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Mat<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().f64())
            .fold(0.0, f64::max)
    }

    /// Rows `idx[0], idx[1], ...` stacked.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat<T> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat::from_vec(idx.len(), self.cols, data)
    }

    /// `self[idx[k]] += src[k]` for every k.
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Mat<T>) {
        assert_eq!(idx.len(), src.rows);
        assert_eq!(self.cols, src.cols);
        for (k, &i) in idx.iter().enumerate() {
            let s = src.row(k);
            self.row_mut(i).iter_mut().zip(s).for_each(|(a, &b)| *a += b);
        }
    }

    pub fn convert<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }
}

/// Strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

/// Strided mutable matrix view into a slice.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

fn check_bounds(len: usize, offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = offset + (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "matrix view out of bounds ({last} >= {len})");
    }
}

impl<'a, T: Scalar> View<'a, T> {
    pub fn of(m: &'a Mat<T>) -> Self {
        Self {
            data: &m.data,
            offset: 0,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

impl<'a, T: Scalar> ViewMut<'a, T> {
    pub fn of(m: &'a mut Mat<T>) -> Self {
        let (rows, cols) = m.shape();
        Self {
            data: &mut m.data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    check_bounds(a.data.len(), a.offset, a.rows, a.cols, a.rs, a.cs);
    check_bounds(b.data.len(), b.offset, b.rows, b.cols, b.rs, b.cs);
    check_bounds(c.data.len(), c.offset, c.rows, c.cols, c.rs, c.cs);
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is borrowed
    // mutably, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `a * b`.
pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(T::one(), View::of(a), View::of(b), T::zero(), ViewMut::of(&mut c));
    c
}

/// `a * b^T`.
pub fn matmul_nt<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm(T::one(), View::of(a), View::of(b).t(), T::zero(), ViewMut::of(&mut c));
    c
}

/// `c += a^T * b`.
pub fn matmul_tn_acc<T: Scalar>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    gemm(T::one(), View::of(a).t(), View::of(b), T::one(), ViewMut::of(c));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(a.rows, b.cols, |i, j| (0..a.cols).map(|k| a.get(i, k) * b.get(k, j)).sum())
    }

    #[test]
    fn gemm_variants_match_naive() {
        let a = Mat::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.5 - 2.0);
        let b = Mat::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.25);
        assert!(matmul(&a, &b).max_abs_diff(&naive(&a, &b)) < 1e-12);
        let bt = Mat::from_fn(4, 3, |i, j| b.get(j, i));
        assert!(matmul_nt(&a, &bt).max_abs_diff(&naive(&a, &b)) < 1e-12);
        let mut c = Mat::from_fn(3, 4, |_, _| 1.0);
        let a2 = Mat::from_fn(5, 3, |i, j| a.get(i, j));
        let d = Mat::from_fn(5, 4, |i, j| (i + j) as f64);
        matmul_tn_acc(&a2, &d, &mut c);
        let at = Mat::from_fn(3, 5, |i, j| a.get(j, i));
        let want = naive(&at, &d);
        for i in 0..3 {
            for j in 0..4 {
                assert!((c.get(i, j) - 1.0 - want.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let m = Mat::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let g = m.gather_rows(&[3, 0, 3]);
        assert_eq!(g.row(0), &[6.0, 7.0]);
        let mut acc = Mat::<f64>::zeros(4, 2);
        acc.scatter_add_rows(&[3, 0, 3], &g);
        assert_eq!(acc.row(3), &[12.0, 14.0]);
        assert_eq!(acc.row(0), &[0.0, 1.0]);
    }
}
