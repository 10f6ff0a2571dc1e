//! Raw accumulate-into matrix kernels behind the tape.
//!
//! Every kernel adds into `out` (callers zero it when they want a plain
//! product) and comes in a sequential and, with the `parallel` feature, a
//! rayon flavor. The parallel split is per output row and each row keeps the
//! sequential inner accumulation order, so the two flavors are
//! bitwise-identical; the dispatching wrappers pick one from
//! [`crate::parallel::is_enabled`] and a work threshold.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

// Below this many flops the rayon fork/join overhead dominates.
const PAR_MIN_WORK: usize = 1 << 14;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn use_par(rows: usize, flops: usize) -> bool {
    crate::parallel::is_enabled() && rows >= 2 && flops >= PAR_MIN_WORK
}

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(feature = "parallel")]
    if use_par(m, m * k * n) {
        out.par_chunks_exact_mut(n).enumerate().for_each(|(i, row)| {
            nn_row(&a[i * k..(i + 1) * k], b, row, n);
        });
        return;
    }
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        nn_row(&a[i * k..(i + 1) * k], b, row, n);
    }
}

#[inline]
fn nn_row(arow: &[f64], b: &[f64], out_row: &mut [f64], n: usize) {
    for (p, &apv) in arow.iter().enumerate() {
        axpy(out_row, apv, &b[p * n..(p + 1) * n]);
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(feature = "parallel")]
    if use_par(m, m * k * n) {
        out.par_chunks_exact_mut(n).enumerate().for_each(|(i, row)| {
            bt_row(&a[i * k..(i + 1) * k], b, row, k);
        });
        return;
    }
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        bt_row(&a[i * k..(i + 1) * k], b, row, k);
    }
}

#[inline]
fn bt_row(arow: &[f64], b: &[f64], out_row: &mut [f64], k: usize) {
    for (j, o) in out_row.iter_mut().enumerate() {
        *o += dot(arow, &b[j * k..(j + 1) * k]);
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    #[cfg(feature = "parallel")]
    if use_par(k, m * k * n) {
        out.par_chunks_exact_mut(n).enumerate().for_each(|(p, row)| {
            tn_row(a, b, row, p, m, k, n);
        });
        return;
    }
    for (p, row) in out.chunks_exact_mut(n).enumerate() {
        tn_row(a, b, row, p, m, k, n);
    }
}

#[inline]
fn tn_row(a: &[f64], b: &[f64], out_row: &mut [f64], p: usize, m: usize, k: usize, n: usize) {
    for i in 0..m {
        axpy(out_row, a[i * k + p], &b[i * n..(i + 1) * n]);
    }
}

/// Normalizes each row to unit L2 norm in place. Returns the index of the
/// first zero-norm row, if any (the data is left partially normalized then).
pub fn l2_normalize_rows_in_place(data: &mut [f64], cols: usize) -> Option<usize> {
    debug_assert!(cols > 0 && data.len() % cols == 0);
    for (r, row) in data.chunks_exact_mut(cols).enumerate() {
        let norm = dot(row, row).sqrt();
        if norm == 0.0 {
            return Some(r);
        }
        for v in row {
            *v /= norm;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let mut rng = 1234u64;
        let mut next = move || {
            // xorshift is plenty for filler values
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng % 1000) as f64 / 500.0 - 1.0
        };
        let (m, k, n) = (7, 5, 6);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let want = mul_ref(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        matmul_nn_acc(&a, &b, &mut out, m, k, n);
        assert_eq!(out, want);

        // a * b == a * (b^T)^T
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(&a, &bt, &mut out, m, k, n);
        assert_eq!(out, want);

        // a * b == (a^T)^T * b
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, &mut out, k, m, n);
        assert_eq!(out, want);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_path_is_bitwise_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // big enough to clear the dispatch threshold
        let (m, k, n) = (64, 96, 80);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();

        crate::parallel::set_enabled(false);
        let mut seq = vec![0.0; m * n];
        matmul_nn_acc(&a, &b, &mut seq, m, k, n);
        crate::parallel::set_enabled(true);
        let mut par = vec![0.0; m * n];
        matmul_nn_acc(&a, &b, &mut par, m, k, n);
        assert!(seq.iter().zip(&par).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn row_normalization() {
        let mut d = vec![3.0, 4.0];
        assert_eq!(l2_normalize_rows_in_place(&mut d, 2), None);
        assert_eq!(d, vec![0.6, 0.8]);
        let mut z = vec![1.0, 1.0, 0.0, 0.0];
        assert_eq!(l2_normalize_rows_in_place(&mut z, 2), Some(1));
    }
}
