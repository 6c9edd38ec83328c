//! Thin safe wrapper around `matrixmultiply::dgemm` for strided views.

/// A strided matrix view into a slice: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn rows(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major view.
    pub fn transposed(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride: 1,
            col_stride: row_stride,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = alpha * a[m×k] · b[k×n] + beta * c[m×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last_index(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(k == 0 || bv.last_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above, and
    // `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// Plain row-major `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        View::rows(0, k),
        b,
        View::rows(0, n),
        0.0,
        &mut c,
        View::rows(0, n),
    );
    c
}
