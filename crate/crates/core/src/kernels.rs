//! Dense kernels with a fixed reduction order.
//!
//! Every output row of a product depends only on the matching input row, so
//! a batch of sequences produces the same bits as evaluating them one by one.

use crate::real::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let mut bt = alloc::vec![T::zero(); n * k];
    for r in 0..k {
        for c in 0..n {
            bt[c * k + r] = b[r * n + c];
        }
    }
    matmul_acc(a, &bt, out, m, n, k);
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn l2_norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Normalizes `v` to unit length; zero vectors are left untouched.
pub fn normalize<T: Real>(v: &mut [T]) {
    let n = l2_norm(v);
    if n > T::zero() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: alloc::vec::Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - e).abs() < 1e-12);
            }
        }
        // aᵀ·c has shape k×n
        let mut tn = vec![0.0; k * n];
        matmul_tn_acc(&a, &c, &mut tn, m, k, n);
        for i in 0..k {
            for j in 0..n {
                let e: f64 = (0..m).map(|t| a[t * k + i] * c[t * n + j]).sum();
                assert!((tn[i * n + j] - e).abs() < 1e-12);
            }
        }
        // c·bᵀ has shape m×k
        let mut nt = vec![0.0; m * k];
        matmul_nt_acc(&c, &b, &mut nt, m, n, k);
        for i in 0..m {
            for j in 0..k {
                let e: f64 = (0..n).map(|t| c[i * n + t] * b[j * n + t]).sum();
                assert!((nt[i * k + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut a = vec![0.1f64, 2.0, -1.0];
        let mut b: alloc::vec::Vec<f64> = a.iter().map(|x| x + 7.5).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
