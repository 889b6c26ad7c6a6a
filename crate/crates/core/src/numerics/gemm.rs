//! Thin strided wrapper over `matrixmultiply::dgemm`.

/// A read-only matrix view. `rows`/`cols` describe the logical (possibly
/// transposed) matrix; `row_stride`/`col_stride` index the backing slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// View of a dense row-major `rows × cols` buffer, optionally transposed.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            Self { data, rows: cols, cols: rows, row_stride: 1, col_stride: cols as isize }
        } else {
            Self { data, rows, cols, row_stride: cols as isize, col_stride: 1 }
        }
    }

    /// A `rows × cols` block starting at `offset` inside a row-major buffer
    /// whose full row length is `ld`.
    pub fn block(data: &'a [f64], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        Self { data: &data[offset..], rows, cols, row_stride: ld as isize, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = (self.rows - 1) as isize * self.row_stride + (self.cols - 1) as isize * self.col_stride;
        assert!(last >= 0 && (last as usize) < self.data.len(), "matrix view out of bounds");
    }
}

/// `c = alpha * a * b + beta * c` for a dense row-major `c`.
pub(crate) fn gemm(a: MatRef, b: MatRef, c: &mut [f64], alpha: f64, beta: f64) {
    let ldc = b.cols;
    gemm_strided(a, b, c, 0, ldc, alpha, beta);
}

/// Like [`gemm`] but writes into a block of a larger row-major buffer.
pub(crate) fn gemm_strided(a: MatRef, b: MatRef, c: &mut [f64], c_offset: usize, ldc: usize, alpha: f64, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let needed = c_offset + (m - 1) * ldc + n;
    assert!(needed <= c.len(), "gemm output out of bounds");
    // SAFETY: all three views were bounds-checked above; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr().add(c_offset),
            ldc as isize,
            1,
        );
    }
}
