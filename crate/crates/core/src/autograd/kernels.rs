//! Dense row-major kernels shared by forward and backward passes.

/// `c (+)= a[m,k] * b[k,n]`
pub(crate) fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c (+)= a[m,k] * b[n,k]^T`
pub(crate) fn mm_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c (+)= a[m,k]^T * b[m,n]`, giving `[k,n]`.
pub(crate) fn mm_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

pub(crate) const GELU_COEF: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = libm::tanh(inner);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}
