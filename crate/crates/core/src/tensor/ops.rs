use super::{numel, Result, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(())
}

/// (outer, len, inner) strides for iterating slices along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    fn unary<F, G>(&self, op: &'static str, f: F, df: G) -> Result<Tensor>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = if self.requires_grad() { out.clone() } else { Vec::new() };
        Tensor::from_op(
            op,
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .zip(x.data())
                    .zip(&y)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            "add",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            "sub",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let db = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Elementwise quotient; a zero denominator is an error.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        if other.data().contains(&0.0) {
            return Err(TensorError::NonFinite { op: "div" });
        }
        let out: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a / b).collect();
        let b = other.clone();
        let q = if other.requires_grad() { out.clone() } else { Vec::new() };
        Tensor::from_op(
            "div",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = g.iter().zip(b.data()).map(|(g, b)| g / b).collect();
                let db = b.requires_grad().then(|| {
                    g.iter()
                        .zip(b.data())
                        .zip(&q)
                        .map(|((g, b), q)| -g * q / b)
                        .collect()
                });
                vec![Some(da), db]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary("scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.unary("add_scalar", |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// `x` for `x >= 0`, `e^x - 1` otherwise.
    pub fn elu(&self) -> Result<Tensor> {
        self.unary(
            "elu",
            |x| if x >= 0.0 { x } else { x.exp_m1() },
            |x, y| if x >= 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(
            "relu",
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Invalid {
                op: "log",
                msg: "input must be positive".into(),
            });
        }
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", stable_sigmoid, |_, y| y * (1.0 - y))
    }

    /// Huber-style smooth L1 with unit transition: `0.5 x^2` inside
    /// `|x| < 1`, `|x| - 0.5` outside.
    pub fn smooth_l1(&self) -> Result<Tensor> {
        self.unary(
            "smooth_l1",
            |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            |x, _| if x.abs() < 1.0 { x } else { x.signum() },
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![self.data().iter().sum()],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Sums out `axis`; the axis is kept with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Tensor::from_op(
            "sum_axis",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let y = if self.requires_grad() { out.clone() } else { Vec::new() };
        Tensor::from_op(
            "softmax",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Divides every slice along `axis` by its sum. Slices summing to zero
    /// map to zeros and pass no gradient.
    pub fn normalize_sum(&self, axis: usize) -> Result<Tensor> {
        check_axis("normalize_sum", self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut totals = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let total: f64 = (0..len).map(|k| x[idx(k)]).sum();
                totals[o * inner + i] = total;
                if total != 0.0 {
                    for k in 0..len {
                        out[idx(k)] = x[idx(k)] / total;
                    }
                }
            }
        }
        let y = if self.requires_grad() { out.clone() } else { Vec::new() };
        Tensor::from_op(
            "normalize_sum",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let total = totals[o * inner + i];
                        if total == 0.0 {
                            continue;
                        }
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = (g[idx(k)] - dot) / total;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let width = *self.shape().last().expect("rank >= 1");
        let rows = self.numel() / width;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let y = out.clone();
        Tensor::from_op(
            "layer_norm",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; y.len()];
                let n = width as f64;
                for r in 0..rows {
                    let gs = &g[r * width..(r + 1) * width];
                    let ys = &y[r * width..(r + 1) * width];
                    let g_mean = gs.iter().sum::<f64>() / n;
                    let gy_mean = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / n;
                    for k in 0..width {
                        dx[r * width + k] = inv_std[r] * (gs[k] - g_mean - ys[k] * gy_mean);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                // dA = G B^T, dB = A^T G
                let da = a.requires_grad().then(|| {
                    let bt = transpose_raw(b.data(), k, n);
                    matmul_raw(g, &bt, m, n, k)
                });
                let db = b.requires_grad().then(|| {
                    let at = transpose_raw(a.data(), m, k);
                    matmul_raw(&at, g, k, m, n)
                });
                vec![da, db]
            }),
        )
    }

    /// Adds a length-`C` bias to every row of an `[N, C]` tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.numel() != self.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let b = bias.data();
        let out = self
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        Tensor::from_op(
            "add_row_bias",
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    /// 2D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", self.shape()),
            });
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        Tensor::from_op(
            "transpose",
            transpose_raw(self.data(), rows, cols),
            vec![cols, rows],
            vec![self.clone()],
            Box::new(move |g| vec![Some(transpose_raw(g, cols, rows))]),
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = row_major_strides(&in_shape);
        // source offset of every output element, in output order
        let mut gather = Vec::with_capacity(self.numel());
        let mut index = vec![0usize; rank];
        for _ in 0..self.numel() {
            gather.push(
                index
                    .iter()
                    .zip(axes)
                    .map(|(&i, &a)| i * in_strides[a])
                    .sum::<usize>(),
            );
            for d in (0..rank).rev() {
                index[d] += 1;
                if index[d] < out_shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        let x = self.data();
        let out = gather.iter().map(|&s| x[s]).collect();
        let n = self.numel();
        Tensor::from_op(
            "permute",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; n];
                for (o, &s) in gather.iter().enumerate() {
                    dx[s] = g[o];
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        check_axis("concat", first, axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(
            "concat",
            out,
            shape,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gp, &len) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[offset..offset + len * inner]);
                        offset += len * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self, axis)?;
        if len == 0 || start + len > self.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "range {start}..{} exceeds axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            });
        }
        let (outer, full, inner) = axis_split(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Tensor::from_op(
            "narrow",
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; n];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Picks flat elements by index into a 1D tensor; backward scatter-adds.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("indices must be nonempty and below {n}"),
            });
        }
        let x = self.data();
        let out = indices.iter().map(|&i| x[i]).collect();
        let idx = indices.to_vec();
        Tensor::from_op(
            "gather",
            out,
            vec![indices.len()],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; n];
                for (gi, &i) in g.iter().zip(&idx) {
                    dx[i] += gi;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Row lookup into a `[rows, C]` table; output `[indices.len(), C]`.
    pub fn index_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "index_rows",
                msg: format!("expected rank 2 table, got {:?}", self.shape()),
            });
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let flat: Vec<usize> = indices
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        if indices.iter().any(|&r| r >= rows) {
            return Err(TensorError::Invalid {
                op: "index_rows",
                msg: format!("row index out of range for {rows} rows"),
            });
        }
        self.gather(&flat)?.reshape(&[indices.len(), cols])
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major `[m,k] x [k,n]` in i-k-j order.
/// Rows of `b` per pass. A pass keeps its block of `b` cache-resident while
/// every row of `a` visits it; per-element summation order is unchanged.
const MATMUL_BLOCK: usize = 128;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p0 in (0..k).step_by(MATMUL_BLOCK) {
        let p1 = (p0 + MATMUL_BLOCK).min(k);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in p0..p1 {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn elu_values() {
        let y = t(&[0.0, -20.0, 2.0], &[3]).elu().unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - (-1.0 + (-20f64).exp())).abs() < 1e-15);
        assert!((y.data()[1] - -0.99999999794).abs() < 1e-11);
        assert_eq!(y.data()[2], 2.0);
    }

    #[test]
    fn add_pairs() {
        assert_eq!(t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap().data(), &[4.0, 6.0]);
        assert!(t(&[1.0], &[1]).add(&t(&[1.0, 2.0], &[2])).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        assert!(t(&[1.0, 0.0], &[2]).log().is_err());
    }

    #[test]
    fn exp_overflow_is_an_error() {
        assert!(matches!(
            t(&[1000.0], &[1]).exp(),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn matmul_small_cases() {
        let id = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(id.matmul(&x).unwrap().data(), x.data());
        let r = t(&[1.0, 2.0], &[1, 2]).matmul(&t(&[3.0, 4.0], &[2, 1])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(x.matmul(&x).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = t(&[0.0, 0.0], &[2]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[1000.0, 0.0], &[2]).softmax(0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
        let s = t(&[1.0, 2.0, 3.0], &[3]).softmax(0).unwrap();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 5e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        let s = t(&data, &[2, 3, 4]).softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|k| s.data()[(o * 3 + k) * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_sum_handles_zero_slices() {
        let y = t(&[1.0, 3.0, 0.0, 0.0], &[2, 2]).normalize_sum(1).unwrap();
        assert_eq!(y.data(), &[0.25, 0.75, 0.0, 0.0]);
    }

    #[test]
    fn layout_round_trips() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t(&data, &[2, 3, 4]);
        let flat = x.reshape(&[2, 12]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(flat.data(), x.data());
        let m = t(&data[..6], &[2, 3]);
        assert_eq!(m.transpose().unwrap().transpose().unwrap().data(), m.data());
        assert_eq!(m.transpose().unwrap().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.permute(&[1, 2, 0]).unwrap().data(), x.data());
        assert!(x.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[2, 2, 2]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c.narrow(0, 0, 1).unwrap().data(), a.data());
        assert_eq!(c.narrow(0, 1, 2).unwrap().data(), b.data());
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let wide = Tensor::concat(&[m.clone(), m.clone()], 1).unwrap();
        assert_eq!(wide.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn smooth_l1_pieces() {
        let y = t(&[0.5, 2.0, -2.0], &[3]).smooth_l1().unwrap();
        assert_eq!(y.data(), &[0.125, 1.5, 1.5]);
    }

    #[test]
    fn gather_scatters_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.gather(&[2, 0, 2]).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }
}
