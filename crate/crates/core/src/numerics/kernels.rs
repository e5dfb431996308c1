//! Dense f64 matrix kernels used by the tape ops.
//!
//! All matrices are row-major slices. The loops are ordered so the innermost
//! pass runs over contiguous output/input rows, which lets the compiler
//! vectorize them; that matters because training runs on a single core.

/// `out = a (m x k) * b (k x n)`, accumulating nothing (out is overwritten).
pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] += a_il * b_row[j];
            }
        }
    }
}

/// `out = a (m x k) * b^T` where `b` is stored as `n x k` rows.
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += a_row[l] * b_row[l];
            }
            out_row[j] = acc;
        }
    }
}

/// `out += a (m x k) * b (k x n)`; used when a gradient flows into a buffer
/// that already holds contributions from another path.
pub fn matmul_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] += a_il * b_row[j];
            }
        }
    }
}

/// `out += a * b^T` with `b` stored `n x k`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += a_row[l] * b_row[l];
            }
            out_row[j] += acc;
        }
    }
}

/// `out += a^T * c` with `a` stored `m x k`, `c` stored `m x n`.
pub fn matmul_tn_acc(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &c[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let out_row = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] += a_il * c_row[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    fn arange(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| (i as f64 * 0.7 - 3.0) * scale).collect()
    }

    #[test]
    fn nn_matches_naive() {
        let (m, k, n) = (5, 7, 4);
        let a = arange(m * k, 0.3);
        let b = arange(k * n, 0.11);
        let mut out = vec![1.0; m * n];
        matmul_nn(&a, &b, &mut out, m, k, n);
        let expect = naive_nn(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_is_nn_with_transposed_b() {
        let (m, k, n) = (4, 6, 3);
        let a = arange(m * k, 0.2);
        let bt = arange(n * k, 0.4); // stored n x k
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for l in 0..k {
                b[l * n + j] = bt[j * k + l];
            }
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut out, m, k, n);
        let expect = naive_nn(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_is_nn_with_transposed_a() {
        let (m, k, n) = (6, 4, 5);
        let a = arange(m * k, 0.15); // stored m x k, logically k x m transposed
        let c = arange(m * n, 0.25);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut out = vec![0.0; k * n];
        matmul_tn_acc(&a, &c, &mut out, m, k, n);
        let expect = naive_nn(&at, &c, k, m, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn acc_variants_add_onto_existing() {
        let (m, k, n) = (3, 3, 3);
        let a = arange(m * k, 0.5);
        let b = arange(k * n, 0.3);
        let mut out = vec![2.0; m * n];
        matmul_nn_acc(&a, &b, &mut out, m, k, n);
        let expect = naive_nn(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - (y + 2.0)).abs() < 1e-12);
        }
    }
}
