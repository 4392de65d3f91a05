//! Slice-level numeric kernels shared by forward evaluation and backward passes.

/// `c[m×n] = alpha · op(a)[m×k] · op(b)[k×n] + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above describe the extents that every caller
    // guarantees; `c` is a distinct mutable slice of at least m·n elements.
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
            n as isize,
            1,
        );
    }
}

pub(crate) const GELU_COEFF: f64 = 0.044_715;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise layer normalization; returns `(y, rstd)` per row.
pub(crate) fn layer_norm_rows(x: &[f64], d: usize, eps: f64, y: &mut [f64], rstd: &mut [f64]) {
    for (r, (xr, yr)) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).enumerate() {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, v) in yr.iter_mut().zip(xr) {
            *o = (v - mean) * rs;
        }
    }
}

/// Masked, max-stabilized softmax over rows of width `n`.
///
/// `mask` covers the trailing `mask.len()` elements and repeats over leading
/// rows. Returns the index of the first fully masked row, if any.
pub(crate) fn softmax_rows(x: &[f64], n: usize, mask: &[bool], y: &mut [f64]) -> Option<usize> {
    let mlen = mask.len();
    for (r, (xr, yr)) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)).enumerate() {
        let off = (r * n) % mlen;
        let mr = &mask[off..off + n];
        if !mr.iter().any(|&m| m) {
            return Some(r);
        }
        let mut max = f64::NEG_INFINITY;
        for (v, &m) in xr.iter().zip(mr) {
            if m && (*v > max || v.is_nan()) {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for ((o, v), &m) in yr.iter_mut().zip(xr).zip(mr) {
            if m {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            } else {
                *o = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for o in yr.iter_mut() {
            *o *= inv;
        }
    }
    None
}
