//! Bounds-checked wrappers over `matrixmultiply::dgemm`.
//!
//! The packed kernel is single-threaded and its reduction order depends only on
//! the operand dimensions, so results are reproducible run to run.

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a dense `rows × cols` buffer, viewed as `cols × rows`.
    pub fn dense_t(rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn check(&self, len: usize) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last =
            self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        assert!(
            last < len,
            "strided view out of bounds: {self:?} over {len}"
        );
    }
}

/// `c = alpha * a · b + beta * c` on strided views.
pub(crate) fn gemm_view(
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner dims");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    la.check(a.len());
    lb.check(b.len());
    lc.check(c.len());
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        // Empty inner product: only the beta scaling applies.
        for i in 0..lc.rows {
            for j in 0..lc.cols {
                let idx = lc.offset + i * lc.row_stride + j * lc.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked against its buffer above, and `c`
    // is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            lc.rows,
            la.cols,
            lc.cols,
            alpha,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}

/// Dense `c (m×n) = op(a) · op(b)` (or `+=` when `accumulate`), where `op`
/// optionally transposes. `a` is stored as `m×k` (or `k×m` if transposed) and
/// `b` as `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let la = if a_t {
        Layout::dense_t(k, m)
    } else {
        Layout::dense(m, k)
    };
    let lb = if b_t {
        Layout::dense_t(n, k)
    } else {
        Layout::dense(k, n)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm_view(1.0, a, la, b, lb, beta, c, Layout::dense(m, n));
}
