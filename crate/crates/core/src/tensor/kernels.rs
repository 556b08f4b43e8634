//! Slice-level numeric kernels shared by [`super::Tensor`] and the tape ops.

/// `c = op(a) · op(b)` (or `c += …` when `accumulate`), with `op` an optional
/// transpose. `a` is stored `[m, k]` (or `[k, m]` if `a_t`), `b` is stored
/// `[k, n]` (or `[n, k]` if `b_t`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, n, 1, accumulate);
}

/// Strided general matrix product; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: output buffer too small");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// In-place max-subtracted softmax; returns the log-sum-exp.
pub(crate) fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
    max + sum.ln()
}

/// Mean and `1 / sqrt(var + eps)` of a vector (two-pass).
pub(crate) fn mean_inv_std(v: &[f64], eps: f64) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    // eps = 0 with a constant vector: treat the centred (all-zero) row as normalised
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, inv)
}

pub(crate) fn flip_rows(src: &[f64], dst: &mut [f64], l: usize, d: usize) {
    for t in 0..l {
        dst[t * d..(t + 1) * d].copy_from_slice(&src[(l - 1 - t) * d..(l - t) * d]);
    }
}

pub(crate) fn shift_rows(src: &[f64], dst: &mut [f64], l: usize, d: usize) {
    if l == 0 {
        return;
    }
    dst[..d].iter_mut().for_each(|v| *v = 0.0);
    dst[d..l * d].copy_from_slice(&src[..(l - 1) * d]);
}

/// Adjoint of [`shift_rows`]: moves rows one position earlier, zero-filling
/// the last row.
pub(crate) fn unshift_rows(src: &[f64], dst: &mut [f64], l: usize, d: usize) {
    if l == 0 {
        return;
    }
    dst[..(l - 1) * d].copy_from_slice(&src[d..l * d]);
    dst[(l - 1) * d..].iter_mut().for_each(|v| *v = 0.0);
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let (lo, hi) = v.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_gemm_variants() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expect = [4.0, 5.0, 10.0, 11.0];
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = [0.0; 4];
                gemm(2, 3, 2, aa, a_t, bb, b_t, &mut c, false);
                assert_eq!(c, expect);
            }
        }
        let mut c = [1.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, true);
        assert_eq!(c, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pairwise_matches_naive() {
        let v: Vec<f64> = (0..37).map(|i| i as f64 * 0.25).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }
}
