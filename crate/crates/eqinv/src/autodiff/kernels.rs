//! Dense float64 matrix kernels.
//!
//! Every kernel ACCUMULATES into its output (callers zero-initialize), so
//! the same code serves both forward products and gradient accumulation.
//! Loop orders keep the innermost loop on contiguous memory, and every
//! summation order is fixed, which keeps results bitwise reproducible.

/// c[m×n] += a[m×k] · b[k×n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            let aik = *aik;
            for (cij, bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aik * bkj;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ (rows of `b` are dotted against rows of `a`)
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (b_row, cij) in b.chunks_exact(k).zip(c_row.iter_mut()) {
            *cij += dot(a_row, b_row);
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (aip, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            let aip = *aip;
            for (cpj, bij) in c_row.iter_mut().zip(b_row) {
                *cpj += aip * bij;
            }
        }
    }
}

/// out[m] += a[m×n] · v[n]
pub fn matvec(a: &[f64], v: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(v.len(), n);
    debug_assert_eq!(out.len(), m);
    for (a_row, o) in a.chunks_exact(n).zip(out.iter_mut()) {
        *o += dot(a_row, v);
    }
}

/// Fixed-order dot product with four independent accumulators; the lane
/// split is part of the reproducibility contract.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    let (xh, xt) = x.split_at(chunks * 4);
    let (yh, yt) = y.split_at(chunks * 4);
    for (xc, yc) in xh.chunks_exact(4).zip(yh.chunks_exact(4)) {
        acc[0] += xc[0] * yc[0];
        acc[1] += xc[1] * yc[1];
        acc[2] += xc[2] * yc[2];
        acc[3] += xc[3] * yc[3];
    }
    let mut tail = 0.0;
    for (xi, yi) in xt.iter().zip(yt) {
        tail += xi * yi;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
