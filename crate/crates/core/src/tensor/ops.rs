use std::rc::Rc;

use super::{common_tape, record, DiffArray, Result, Tape, TensorError};

impl DiffArray {
    fn tape_owned(&self) -> Option<Tape> {
        self.node.as_ref().map(|n| n.tape.clone())
    }

    fn unary<F, D>(&self, op: &'static str, f: F, df: D) -> DiffArray
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let y: Rc<[f64]> = self.values.iter().map(|&v| f(v)).collect();
        let x = self.values.clone();
        let yb = y.clone();
        record(
            op,
            self.tape_owned(),
            self.shape.clone(),
            y,
            &[self],
            move |g, ids, buf| {
                buf.accumulate(ids[0], |dx| {
                    for i in 0..dx.len() {
                        // skipping zero upstream keeps 0 * inf out of the sum
                        if g[i] != 0.0 {
                            dx[i] += g[i] * df(x[i], yb[i]);
                        }
                    }
                })
            },
        )
    }

    fn check_domain(&self, op: &'static str, domain: &'static str, ok: impl Fn(f64) -> bool) -> Result<()> {
        match self.values.iter().find(|&&v| !ok(v)) {
            Some(&value) => Err(TensorError::Domain { op, value, domain }),
            None => Ok(()),
        }
    }

    pub fn neg(&self) -> DiffArray {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    /// max(x, 0); derivative at 0 is 0.
    pub fn relu(&self) -> DiffArray {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> DiffArray {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural log; requires strictly positive input.
    pub fn log(&self) -> Result<DiffArray> {
        self.check_domain("log", "x > 0", |x| x > 0.0)?;
        Ok(self.unary("log", f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Result<DiffArray> {
        self.check_domain("sqrt", "x >= 0", |x| x >= 0.0)?;
        Ok(self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y))
    }

    pub fn square(&self) -> DiffArray {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// |x|; derivative at 0 is 0.
    pub fn abs(&self) -> DiffArray {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// log(1 + e^x), evaluated without overflow.
    pub fn softplus(&self) -> DiffArray {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn add_scalar(&self, c: f64) -> DiffArray {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> DiffArray {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    fn binary<F, DA, DB>(&self, other: &DiffArray, op: &'static str, f: F, da: DA, db: DB) -> Result<DiffArray>
    where
        F: Fn(f64, f64) -> f64,
        DA: Fn(f64, f64, f64) -> f64 + 'static,
        DB: Fn(f64, f64, f64) -> f64 + 'static,
    {
        let tape = common_tape(op, &[self, other])?;
        let shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        let a = self.broadcast_to(&shape)?;
        let b = other.broadcast_to(&shape)?;
        let y: Rc<[f64]> = a.values.iter().zip(b.values.iter()).map(|(&p, &q)| f(p, q)).collect();
        let (av, bv, yv) = (a.values.clone(), b.values.clone(), y.clone());
        Ok(record(op, tape, shape, y, &[&a, &b], move |g, ids, buf| {
            buf.accumulate(ids[0], |dx| {
                for i in 0..dx.len() {
                    if g[i] != 0.0 {
                        dx[i] += g[i] * da(av[i], bv[i], yv[i]);
                    }
                }
            });
            buf.accumulate(ids[1], |dx| {
                for i in 0..dx.len() {
                    if g[i] != 0.0 {
                        dx[i] += g[i] * db(av[i], bv[i], yv[i]);
                    }
                }
            });
        }))
    }

    pub fn add(&self, other: &DiffArray) -> Result<DiffArray> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &DiffArray) -> Result<DiffArray> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &DiffArray) -> Result<DiffArray> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &DiffArray) -> Result<DiffArray> {
        self.binary(other, "div", |a, b| a / b, |_, b, _| 1.0 / b, |_, b, y| -y / b)
    }

    /// Elementwise maximum; on ties the gradient goes to `self`.
    pub fn maximum(&self, other: &DiffArray) -> Result<DiffArray> {
        self.binary(
            other,
            "maximum",
            |a, b| if a >= b { a } else { b },
            |a, b, _| if a >= b { 1.0 } else { 0.0 },
            |a, b, _| if a >= b { 0.0 } else { 1.0 },
        )
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<DiffArray> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let map = broadcast_index_map(&self.shape, shape).ok_or_else(|| TensorError::ShapeMismatch {
            op: "broadcast_to",
            lhs: self.shape.clone(),
            rhs: shape.to_vec(),
        })?;
        let y: Rc<[f64]> = map.iter().map(|&i| self.values[i]).collect();
        Ok(record(
            "broadcast_to",
            self.tape_owned(),
            shape.to_vec(),
            y,
            &[self],
            move |g, ids, buf| {
                buf.accumulate(ids[0], |dx| {
                    for (o, &i) in map.iter().enumerate() {
                        dx[i] += g[o];
                    }
                })
            },
        ))
    }

    /// Sum of all entries as a scalar (shape `[]`).
    pub fn sum(&self) -> DiffArray {
        let total: f64 = self.values.iter().sum();
        record(
            "sum",
            self.tape_owned(),
            Vec::new(),
            Rc::from(vec![total]),
            &[self],
            |g, ids, buf| buf.accumulate(ids[0], |dx| dx.iter_mut().for_each(|d| *d += g[0])),
        )
    }

    pub fn mean(&self) -> DiffArray {
        let n = self.len().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<DiffArray> {
        if axis >= self.shape.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                detail: format!("axis {axis} out of range for shape {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &self.values[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(record(
            "sum_axis",
            self.tape_owned(),
            shape,
            out.into(),
            &[self],
            move |g, ids, buf| {
                buf.accumulate(ids[0], |dx| {
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            for i in 0..inner {
                                dx[base + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            },
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<DiffArray> {
        let n = self.shape.get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffArray> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(record(
            "reshape",
            self.tape_owned(),
            shape.to_vec(),
            self.values.clone(),
            &[self],
            |g, ids, buf| buf.accumulate(ids[0], |dx| dx.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
        ))
    }

    /// Transpose of a 2-D array.
    pub fn transpose(&self) -> Result<DiffArray> {
        let [r, c] = self.shape[..] else {
            return Err(TensorError::Invalid {
                op: "transpose",
                detail: format!("expected 2-D array, got shape {:?}", self.shape),
            });
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Ok(record(
            "transpose",
            self.tape_owned(),
            vec![c, r],
            out.into(),
            &[self],
            move |g, ids, buf| {
                buf.accumulate(ids[0], |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                })
            },
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[DiffArray], axis: usize) -> Result<DiffArray> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            detail: "no arrays to concatenate".into(),
        })?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        for p in &parts[1..] {
            let compatible = p.shape.len() == rank && (0..rank).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let refs: Vec<&DiffArray> = parts.iter().collect();
        let tape = common_tape("concat", &refs)?;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.values[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        Ok(record("concat", tape, shape, out.into(), &refs, move |g, ids, buf| {
            let mut offset = 0;
            for (k, &w) in widths.iter().enumerate() {
                buf.accumulate(ids[k], |dx| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        dx[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
                offset += w;
            }
        }))
    }

    /// Picks entries by flat index into an array of the given shape.
    pub fn gather(&self, indices: &[usize], shape: &[usize]) -> Result<DiffArray> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::Invalid {
                op: "gather",
                detail: format!("{} indices cannot fill shape {shape:?}", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                detail: format!("index {bad} out of bounds for {} entries", self.len()),
            });
        }
        let y: Rc<[f64]> = indices.iter().map(|&i| self.values[i]).collect();
        let idx = indices.to_vec();
        Ok(record(
            "gather",
            self.tape_owned(),
            shape.to_vec(),
            y,
            &[self],
            move |g, ids, buf| {
                buf.accumulate(ids[0], |dx| {
                    for (o, &i) in idx.iter().enumerate() {
                        dx[i] += g[o];
                    }
                })
            },
        ))
    }

    /// Selects rows (entries along axis 0).
    pub fn index_select(&self, rows: &[usize]) -> Result<DiffArray> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return Err(TensorError::Invalid {
                op: "index_select",
                detail: "cannot select rows of a 0-d array".into(),
            });
        };
        let inner: usize = rest.iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Invalid {
                op: "index_select",
                detail: format!("row {bad} out of bounds for {n} rows"),
            });
        }
        let indices: Vec<usize> = rows.iter().flat_map(|&r| r * inner..(r + 1) * inner).collect();
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        self.gather(&indices, &shape)
    }

    /// Stable ascending sort permutation of the flattened values. Not differentiable.
    pub fn sort_permutation(&self) -> Vec<usize> {
        stable_argsort(self.values.iter().copied())
    }

    /// Median along axis 0. Even counts average the two middle order
    /// statistics; gradient flows only to the selected entries, with ties
    /// broken by original position.
    pub fn median_axis0(&self) -> Result<DiffArray> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return Err(TensorError::Invalid {
                op: "median",
                detail: "median needs at least one axis".into(),
            });
        };
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "median",
                detail: "empty input".into(),
            });
        }
        let inner: usize = rest.iter().product();
        let mut lo = Vec::with_capacity(inner);
        let mut hi = Vec::with_capacity(inner);
        for c in 0..inner {
            let order = stable_argsort((0..n).map(|k| self.values[k * inner + c]));
            lo.push(order[(n - 1) / 2] * inner + c);
            hi.push(order[n / 2] * inner + c);
        }
        let lower = self.gather(&lo, rest)?;
        let upper = self.gather(&hi, rest)?;
        Ok(lower.add(&upper)?.mul_scalar(0.5))
    }

    /// Sum over rows of log softmax(logits)[label] for a `(batch, classes)` array.
    pub fn categorical_log_likelihood(&self, labels: &[usize]) -> Result<DiffArray> {
        let [b, k] = self.shape[..] else {
            return Err(TensorError::Invalid {
                op: "categorical_log_likelihood",
                detail: format!("expected (batch, classes) logits, got {:?}", self.shape),
            });
        };
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "categorical_log_likelihood",
                lhs: self.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::Invalid {
                op: "categorical_log_likelihood",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for r in 0..b {
            let row = &self.values[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            total += row[labels[r]] - lse;
            for (p, &z) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let labels = labels.to_vec();
        Ok(record(
            "categorical_log_likelihood",
            self.tape_owned(),
            Vec::new(),
            Rc::from(vec![total]),
            &[self],
            move |g, ids, buf| {
                buf.accumulate(ids[0], |dx| {
                    for r in 0..b {
                        for c in 0..k {
                            let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                            dx[r * k + c] += g[0] * (onehot - probs[r * k + c]);
                        }
                    }
                })
            },
        ))
    }
}

/// Median of a non-empty vector as a differentiable scalar.
pub fn differentiable_median(x: &DiffArray) -> Result<DiffArray> {
    if x.shape().len() != 1 {
        return Err(TensorError::Invalid {
            op: "median",
            detail: format!("expected a vector, got shape {:?}", x.shape()),
        });
    }
    x.median_axis0()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

fn stable_argsort(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = values.enumerate().map(|(i, v)| (v, i)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of the target shape, the source flat index.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let pad = dst.len() - src.len();
    let mut strides = vec![0; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let d = dst[i + pad];
        if src[i] == d {
            strides[i + pad] = acc;
        } else if src[i] != 1 {
            return None;
        }
        acc *= src[i];
    }
    let total: usize = dst.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0; dst.len()];
    for _ in 0..total {
        map.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..dst.len()).rev() {
            index[ax] += 1;
            if index[ax] < dst[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Some(map)
}
