use super::{common_tape, record, DiffArray, Result, TensorError};

/// `c += op(a) * op(b)` for row-major buffers, where `op` optionally transposes.
/// `a` is logically `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe the row-major layouts
    // of `a` (m x k or its transpose), `b` (k x n or its transpose) and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl DiffArray {
    /// Matrix product of `(m, k)` and `(k, n)` arrays.
    pub fn matmul(&self, other: &DiffArray) -> Result<DiffArray> {
        let (&[m, k], &[k2, n]) = (&self.shape[..], &other.shape[..]) else {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let tape = common_tape("matmul", &[self, other])?;
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, &self.values, false, &other.values, false, &mut out);
        let (a, b) = (self.values.clone(), other.values.clone());
        Ok(record(
            "matmul",
            tape,
            vec![m, n],
            out.into(),
            &[self, other],
            move |g, ids, buf| {
                // dA = G B^T, dB = A^T G
                buf.accumulate(ids[0], |da| gemm_acc(m, n, k, g, false, &b, true, da));
                buf.accumulate(ids[1], |db| gemm_acc(k, m, n, &a, true, g, false, db));
            },
        ))
    }
}
