//! Dense row-major kernels. Every output element accumulates its reduction
//! index in ascending order, so results do not depend on blocking or on the
//! instruction set the loops vectorize to.

use super::Element;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    let mut rows = c.chunks_exact_mut(n).zip(a.chunks_exact(k));
    // Four output rows share each streamed row of `b`.
    loop {
        let Some((c0, a0)) = rows.next() else { break };
        let Some((c1, a1)) = rows.next() else {
            axpy_rows1(c0, a0, b, n);
            break;
        };
        let Some((c2, a2)) = rows.next() else {
            axpy_rows1(c0, a0, b, n);
            axpy_rows1(c1, a1, b, n);
            break;
        };
        let Some((c3, a3)) = rows.next() else {
            axpy_rows1(c0, a0, b, n);
            axpy_rows1(c1, a1, b, n);
            axpy_rows1(c2, a2, b, n);
            break;
        };
        for (p, brow) in b.chunks_exact(n).enumerate() {
            let (s0, s1, s2, s3) = (a0[p], a1[p], a2[p], a3[p]);
            let it = c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow);
            for ((((x0, x1), x2), x3), &bv) in it {
                *x0 += s0 * bv;
                *x1 += s1 * bv;
                *x2 += s2 * bv;
                *x3 += s3 * bv;
            }
        }
    }
}

#[inline]
fn axpy_rows1<T: Element>(crow: &mut [T], arow: &[T], b: &[T], n: usize) {
    for (&s, brow) in arow.iter().zip(b.chunks_exact(n)) {
        for (x, &bv) in crow.iter_mut().zip(brow) {
            *x += s * bv;
        }
    }
}

/// `c[k×n] += aᵀ · d` with `a[m×k]`, `d[m×n]`.
pub fn gemm_tn_acc<T: Element>(a: &[T], d: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n == 0 {
        return;
    }
    for (arow, drow) in a.chunks_exact(k).zip(d.chunks_exact(n)) {
        for (&s, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            for (x, &dv) in crow.iter_mut().zip(drow) {
                *x += s * dv;
            }
        }
    }
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax of `row + mask` in place, stabilized by the row maximum.
/// Returns `false` when every entry is masked.
pub fn softmax_masked_row<T: Element>(row: &mut [T], mask: Option<&[T]>) -> bool {
    if let Some(mask) = mask {
        if mask.iter().all(|&m| super::is_masked(m)) {
            return false;
        }
        for (x, &m) in row.iter_mut().zip(mask) {
            *x += m;
        }
    }
    softmax_row(row);
    true
}

pub fn softmax_row<T: Element>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_every_row_remainder() {
        for m in 1..=9 {
            let (k, n) = (5, 7);
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(&a, &b, &mut c, m, k, n);
            // same accumulation order as the naive loop: bit-identical
            assert_eq!(c, naive(&a, &b, m, k, n), "m={m}");
        }
    }

    #[test]
    fn gemm_tn_matches_transpose_then_gemm() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 4.0).collect();
        let d: Vec<f64> = (0..m * n).map(|i| (i as f64).sqrt()).collect();
        let mut c = vec![0.0; k * n];
        gemm_tn_acc(&a, &d, &mut c, m, k, n);
        let at = transpose(&a, m, k);
        assert_eq!(c, naive(&at, &d, k, m, n));
    }

    #[test]
    fn masked_entry_underflows_to_zero() {
        let mut row = vec![0.0f32, 0.0, 0.0];
        let mask = [0.0, 0.0, f32::mask_value()];
        assert!(softmax_masked_row(&mut row, Some(&mask)));
        assert_eq!(row, vec![0.5, 0.5, 0.0]);
    }
}
