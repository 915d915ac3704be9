//! Slice-level numeric kernels shared by the value API and the autodiff graph.
//!
//! All matrices are row-major. Loops are written so the innermost one walks a
//! contiguous row, which lets LLVM vectorize them for both `f32` and `f64`.

use crate::scalar::Scalar;

/// `c += a * b` with `a: (m, k)`, `b: (k, n)`, `c: (m, n)`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += aᵀ * d` with `a: (m, k)`, `d: (m, n)`, `c: (k, n)`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], d: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let d_row = &d[p * n..(p + 1) * n];
        let a_row = &a[p * k..(p + 1) * k];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &dv) in c_row.iter_mut().zip(d_row) {
                *cv += av * dv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Gram matrix of the `r` rows of `a: (r, d)` written into `out: (r, r)`.
///
/// Each unordered pair is computed once and mirrored, so the result is
/// bit-exactly symmetric.
pub fn gram_into<T: Scalar>(a: &[T], r: usize, d: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), r * r);
    for i in 0..r {
        let ri = &a[i * d..(i + 1) * d];
        for j in i..r {
            let v = dot(ri, &a[j * d..(j + 1) * d]);
            out[i * r + j] = v;
            out[j * r + i] = v;
        }
    }
}

/// Backward of [`gram_into`]: `da += (dg + dgᵀ) a`.
pub fn gram_backward_acc<T: Scalar>(a: &[T], dg: &[T], r: usize, d: usize, da: &mut [T]) {
    let mut sym = vec![T::zero(); r * r];
    for i in 0..r {
        for j in 0..r {
            sym[i * r + j] = dg[i * r + j] + dg[j * r + i];
        }
    }
    matmul_acc(&sym, a, da, r, r, d);
}

/// Divides each length-`d` row by `max(‖row‖₂, eps)`; returns the clamped norms.
pub fn normalize_rows<T: Scalar>(x: &[T], d: usize, eps: T, out: &mut [T]) -> Vec<T> {
    let rows = x.len() / d;
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let n = dot(row, row).sqrt().max(eps);
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = v / n;
        }
        norms.push(n);
    }
    norms
}

/// Backward of [`normalize_rows`] given the forward output `y` and clamped norms.
pub fn normalize_rows_backward_acc<T: Scalar>(
    y: &[T],
    norms: &[T],
    eps: T,
    dy: &[T],
    d: usize,
    dx: &mut [T],
) {
    for (r, &n) in norms.iter().enumerate() {
        let yr = &y[r * d..(r + 1) * d];
        let gr = &dy[r * d..(r + 1) * d];
        let out = &mut dx[r * d..(r + 1) * d];
        if n > eps {
            let proj = dot(yr, gr);
            for ((o, &g), &yv) in out.iter_mut().zip(gr).zip(yr) {
                *o += (g - yv * proj) / n;
            }
        } else {
            for (o, &g) in out.iter_mut().zip(gr) {
                *o += g / eps;
            }
        }
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &v in row {
        total += (v - max).exp();
    }
    let lse = max + total.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

pub fn softmax_row_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        let mut ct = [0.0; 9];
        // aᵀ a for a (2, 3)
        matmul_tn_acc(&a, &a, &mut ct, 2, 3, 3);
        assert_eq!(ct, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..6).map(f64::from).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }

    #[test]
    fn log_softmax_is_shift_invariant() {
        let mut a = [0.0f64; 3];
        let mut b = [0.0f64; 3];
        log_softmax_row(&[1.0, 2.0, 3.0], &mut a);
        log_softmax_row(&[101.0, 102.0, 103.0], &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
