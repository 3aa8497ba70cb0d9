//! Thin strided wrappers over `matrixmultiply::sgemm`.

/// Row/column strides of a logical matrix view.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols as isize, cs: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols as isize }
    }
}

/// `c = alpha * a·b + beta * c` where `a` is `m×k` and `b` is `k×n`.
///
/// Slices must cover every element addressed by the layouts.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(extent(m, k, la) <= a.len());
    debug_assert!(extent(k, n, lb) <= b.len());
    debug_assert!(extent(m, n, lc) <= c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * lc.rs + j as isize * lc.cs) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: the debug assertions above describe the contract; every caller
    // in this crate derives the layouts from the slice shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

fn extent(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * l.rs + (cols - 1) as isize * l.cs) as usize + 1
}

/// Row-major `a (m×k) · b (k×n)` into a fresh buffer.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        Layout::row_major(k),
        b,
        Layout::row_major(n),
        0.0,
        &mut c,
        Layout::row_major(n),
    );
    c
}
