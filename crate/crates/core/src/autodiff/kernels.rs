//! Dense row-major kernels. All reductions run in a fixed order.

use super::Scalar;

/// `out += a · b` with `a: n×k`, `b: k×m`, `out: n×m`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: n×k`, `b: m×k`, `out: n×m`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · c` with `a: n×k`, `c: n×m`, `out: k×m`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], c: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(c.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

/// Dot product with eight fixed accumulation lanes.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Tanh-approximated Gaussian error linear unit.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        matmul_acc(&a, &b, &mut out, 2, 3, 4);
        // bt: transpose b explicitly
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut out2 = vec![0.0; 8];
        matmul_bt_acc(&a, &bt, &mut out2, 2, 3, 4);
        assert_eq!(out, out2);
        // at: (aᵀ)ᵀ · b where a is stored as its transpose
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let mut out3 = vec![0.0; 8];
        matmul_at_acc(&at, &b, &mut out3, 3, 2, 4);
        assert_eq!(out, out3);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
