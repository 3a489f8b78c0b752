//! Reverse-mode differentiation over small dense matrices.

use std::fmt;

/// Row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, b: &Tensor) -> Tensor {
        assert_eq!(self.cols, b.rows, "matmul inner dims");
        let mut out = Tensor::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    fn add_assign(&mut self, o: &Tensor) {
        debug_assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    fn zip(&self, o: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), o.shape(), "elementwise shapes");
        Tensor::new(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&o.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Second operand is `1×cols` (row bias) or `rows×1` (column bias).
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Tanh(Var),
    Silu(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowCenter(Var),
    RowNormalize(Var, f64),
    RowStandardize(Var, f64),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

/// A recorded computation. Build values with the op methods, then call
/// [`Tape::backward`] on a scalar output.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, v: Tensor, op: Op) -> Var {
        self.values.push(v);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Parameter or input.
    pub fn leaf(&mut self, v: Tensor) -> Var {
        self.push(v, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0].data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (x, bias) = (self.value(a), self.value(b));
        let mut out = x.clone();
        if bias.rows == 1 && bias.cols == x.cols {
            for r in 0..x.rows {
                for c in 0..x.cols {
                    out.data[r * x.cols + c] += bias.data[c];
                }
            }
        } else if bias.cols == 1 && bias.rows == x.rows {
            for r in 0..x.rows {
                for c in 0..x.cols {
                    out.data[r * x.cols + c] += bias.data[r];
                }
            }
        } else {
            panic!("broadcast shape {:?} onto {:?}", bias.shape(), x.shape());
        }
        self.push(out, Op::AddBroadcast(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows {
            let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows widths");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(
            Tensor::new(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows, "slice_rows range");
        let v = Tensor::new(
            len,
            t.cols,
            t.data[start * t.cols..(start + len) * t.cols].to_vec(),
        );
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols heights");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice_cols range");
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Subtract each row's mean.
    pub fn row_center(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let m = t.row(r).iter().sum::<f64>() / t.cols as f64;
            for v in &mut out.data[r * t.cols..(r + 1) * t.cols] {
                *v -= m;
            }
        }
        self.push(out, Op::RowCenter(a))
    }

    /// Divide each row by `sqrt(|row|² + eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let n = (t.row(r).iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for v in &mut out.data[r * t.cols..(r + 1) * t.cols] {
                *v /= n;
            }
        }
        self.push(out, Op::RowNormalize(a, eps))
    }

    /// Zero mean, unit variance per row.
    pub fn row_standardize(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = t.cols as f64;
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = t.row(r);
            let m = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            for (o, v) in out.data[r * t.cols..(r + 1) * t.cols].iter_mut().zip(row) {
                *o = (v - m) / s;
            }
        }
        self.push(out, Op::RowStandardize(a, eps))
    }

    /// Pick flat elements `idx` of `a` into a `rows×cols` matrix.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather shape");
        let t = self.value(a);
        let v = Tensor::new(rows, cols, idx.iter().map(|&i| t.data[i]).collect());
        self.push(v, Op::Gather(a, idx))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Gradients of scalar `out` with respect to every recorded value.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut g: Vec<Option<Tensor>> = vec![None; self.values.len()];
        g[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let acc = |g: &mut Vec<Option<Tensor>>, v: Var, d: Tensor| match &mut g[v.0] {
                Some(t) => t.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            let x = |v: Var| &self.values[v.0];
            let y = &self.values[i];
            match &self.ops[i] {
                Op::Leaf => {
                    g[i] = Some(gi);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut g, *a, gi.matmul(&x(*b).transpose()));
                    acc(&mut g, *b, x(*a).transpose().matmul(&gi));
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gi.clone());
                    acc(&mut g, *b, gi);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *a, gi.clone());
                    acc(&mut g, *b, gi.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(&mut g, *a, gi.zip(x(*b), |d, v| d * v));
                    acc(&mut g, *b, gi.zip(x(*a), |d, v| d * v));
                }
                Op::AddBroadcast(a, b) => {
                    let bias = x(*b);
                    let by_col = bias.rows == 1 && bias.cols == gi.cols;
                    let mut db = Tensor::zeros(bias.rows, bias.cols);
                    for r in 0..gi.rows {
                        for c in 0..gi.cols {
                            let k = if by_col { c } else { r };
                            db.data[k] += gi.data[r * gi.cols + c];
                        }
                    }
                    acc(&mut g, *a, gi);
                    acc(&mut g, *b, db);
                }
                Op::Scale(a, s) => acc(&mut g, *a, gi.map(|v| v * s)),
                Op::AddScalar(a) => acc(&mut g, *a, gi),
                Op::Square(a) => acc(&mut g, *a, gi.zip(x(*a), |d, v| 2.0 * d * v)),
                Op::Exp(a) => acc(&mut g, *a, gi.zip(y, |d, v| d * v)),
                Op::Tanh(a) => acc(&mut g, *a, gi.zip(y, |d, v| d * (1.0 - v * v))),
                Op::Silu(a) => acc(
                    &mut g,
                    *a,
                    gi.zip(x(*a), |d, v| {
                        let s = sigmoid(v);
                        d * (s + v * s * (1.0 - s))
                    }),
                ),
                Op::Gelu(a) => acc(&mut g, *a, gi.zip(x(*a), |d, v| d * gelu_grad(v))),
                Op::Clamp(a, lo, hi) => acc(
                    &mut g,
                    *a,
                    gi.zip(x(*a), |d, v| if v < *lo || v > *hi { 0.0 } else { d }),
                ),
                Op::SoftmaxRows(a) => {
                    let mut d = gi.clone();
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = gi.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..y.cols {
                            d.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::Transpose(a) => acc(&mut g, *a, gi.transpose()),
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = x(*p);
                        let d = Tensor::new(t.rows, t.cols, gi.data[off..off + t.len()].to_vec());
                        off += t.len();
                        acc(&mut g, *p, d);
                    }
                }
                Op::SliceRows(a, start) => {
                    let t = x(*a);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    d.data[start * t.cols..start * t.cols + gi.len()].copy_from_slice(&gi.data);
                    acc(&mut g, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = x(*p);
                        let mut d = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            d.data[r * t.cols..(r + 1) * t.cols]
                                .copy_from_slice(&gi.row(r)[off..off + t.cols]);
                        }
                        off += t.cols;
                        acc(&mut g, *p, d);
                    }
                }
                Op::SliceCols(a, start) => {
                    let t = x(*a);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for r in 0..t.rows {
                        d.data[r * t.cols + start..r * t.cols + start + gi.cols]
                            .copy_from_slice(gi.row(r));
                    }
                    acc(&mut g, *a, d);
                }
                Op::RowCenter(a) => {
                    let mut d = gi.clone();
                    for r in 0..gi.rows {
                        let m = gi.row(r).iter().sum::<f64>() / gi.cols as f64;
                        for v in &mut d.data[r * gi.cols..(r + 1) * gi.cols] {
                            *v -= m;
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::RowNormalize(a, eps) => {
                    let t = x(*a);
                    let mut d = gi.clone();
                    for r in 0..t.rows {
                        let n = (t.row(r).iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(gi.row(r)).map(|(p, q)| p * q).sum();
                        for c in 0..t.cols {
                            d.data[r * t.cols + c] = (gi.data[r * t.cols + c] - yr[c] * dot) / n;
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::RowStandardize(a, eps) => {
                    let t = x(*a);
                    let n = t.cols as f64;
                    let mut d = gi.clone();
                    for r in 0..t.rows {
                        let row = t.row(r);
                        let m = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                        let s = (var + eps).sqrt();
                        let yr = y.row(r);
                        let gr = gi.row(r);
                        let gm = gr.iter().sum::<f64>() / n;
                        let gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for c in 0..t.cols {
                            d.data[r * t.cols + c] = (gr[c] - gm - yr[c] * gy) / s;
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::Gather(a, idx) => {
                    let t = x(*a);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for (k, &j) in idx.iter().enumerate() {
                        d.data[j] += gi.data[k];
                    }
                    acc(&mut g, *a, d);
                }
                Op::Sum(a) => {
                    let t = x(*a);
                    acc(&mut g, *a, Tensor::filled(t.rows, t.cols, gi.data[0]));
                }
                Op::Mean(a) => {
                    let t = x(*a);
                    acc(
                        &mut g,
                        *a,
                        Tensor::filled(t.rows, t.cols, gi.data[0] / t.len() as f64),
                    );
                }
            }
        }
        Gradients { grads: g }
    }
}

/// Result of [`Tape::backward`]. Values that do not influence the output
/// have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zero-filled when `v` does not reach the output.
    pub fn or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows, like.cols))
    }
}
