//! Dense kernels shared by the graph operations, plus the thread-local
//! multiply-accumulate counters used for complexity accounting.

use std::cell::Cell;

/// Read-only strided view of a matrix stored in a flat slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` view.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "buffer too small for {rows}x{cols}");
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view, no copy.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `c = alpha · a · b + beta · c` with `c` row-major `a.rows × b.cols`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    count_matmul((m * k * n) as u64);
    // SAFETY: the views were constructed from slices whose length covers
    // every strided index below `rows × cols`, and `c` holds at least m·n
    // contiguous elements; matrixmultiply reads/writes only those.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Multiply-accumulate totals, split by where they were spent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    /// Dense products (linear layers, convolutions).
    pub matmul: u64,
    /// Score and weighted-value products inside attention.
    pub attention: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.matmul + self.attention
    }
}

thread_local! {
    static MACS: Cell<MacCount> = const { Cell::new(MacCount { matmul: 0, attention: 0 }) };
}

pub fn reset_macs() {
    MACS.with(|m| m.set(MacCount::default()));
}

pub fn macs() -> MacCount {
    MACS.with(|m| m.get())
}

pub(crate) fn count_matmul(n: u64) {
    MACS.with(|m| {
        let mut c = m.get();
        c.matmul += n;
        m.set(c);
    });
}

pub(crate) fn count_attention(n: u64) {
    MACS.with(|m| {
        let mut c = m.get();
        c.attention += n;
        m.set(c);
    });
}
