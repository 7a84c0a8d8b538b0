//! Raw slice kernels shared by the graph's forward and backward passes.

use crate::numerics::Real;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            c_row.iter_mut().zip(b_row).for_each(|(c, &b)| *c += a_ip * b);
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            c_row.iter_mut().zip(b_row).for_each(|(c, &b)| *c += a_ip * b);
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four partial sums let the compiler vectorize without reassociation.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GeLU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place numerically stable softmax.
pub fn softmax_inplace<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);
        // b transposed into 4x3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        // aᵀ as 3x2, then (aᵀ)ᵀ·b via tn
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let mut c3 = vec![0.0; 8];
        matmul_tn_acc(&at, &b, &mut c3, 3, 2, 4);
        assert_eq!(c, c3);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn softmax_is_normalized_and_shift_invariant() {
        let mut a = vec![1000.0f32, 1001.0, 999.0];
        softmax_inplace(&mut a);
        let s: f32 = a.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(a[1] > a[0] && a[0] > a[2]);
    }
}
