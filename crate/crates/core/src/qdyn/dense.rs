//! Strided real matrix products for the master-equation right-hand side.

/// Read-only view of a row-major (possibly strided) matrix.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize, row_stride: usize) -> Self {
        assert!(rows == 0 || cols == 0 || (rows - 1) * row_stride + cols <= data.len());
        Self { data, rows, cols, rs: row_stride as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }
}

/// `c ← alpha·a·b + beta·c`, with `c` row-major with the given row stride.
pub(crate) fn gemm(alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], c_stride: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(m == 0 || n == 0 || (m - 1) * c_stride + n <= c.len());
    // SAFETY: every index touched by the kernel lies inside the slices, as
    // checked by the view constructors and the assertion above; `c` does not
    // alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            c_stride as isize,
            1,
        );
    }
}
