use super::tensor::Float;

/// `c = op(a) * op(b) (+ c if accumulate)` on row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is
/// stored as its transpose in row-major order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Float],
    a_trans: bool,
    b: &[Float],
    b_trans: bool,
    c: &mut [Float],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches
    // given these strides.
    unsafe {
        kernel(
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

#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as kernel;
#[cfg(feature = "f64")]
use matrixmultiply::dgemm as kernel;
