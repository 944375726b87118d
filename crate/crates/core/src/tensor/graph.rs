use rand::Rng;

use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation defined outside the tensor core.
///
/// `backward` receives the upstream gradient of the output and must add the
/// contribution for every input whose slot in `grads` is `Some`.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        grads: &mut [Option<Vec<f64>>],
    );
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    Reshape(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear Wengert tape. Nodes are appended in evaluation order, which is a
/// topological order, so backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| TensorError::NotMatrix {
        op,
        shape: t.shape().to_vec(),
    })
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; accurate to a few ulps, which is all the
/// activation needs, and much cheaper than libm's `tanh`.
fn fast_tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax > 20.0 {
        return x.signum();
    }
    if ax < 0.01 {
        let x2 = x * x;
        return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0)));
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c += a · b` for row-major `a[m,k]`, `b[k,n]`.
///
/// Four rows of `b` are folded into each pass over a row of `c`; the sums are
/// still accumulated in increasing `p` order.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 0 {
        return;
    }
    for (arow, crow) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)).take(m) {
        let arow = &arow[..k];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for ((((cv, &x0), &x1), &x2), &x3) in crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *cv = *cv + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
            p += 4;
        }
        for (q, &aq) in arow.iter().enumerate().skip(p) {
            for (cv, &bv) in crow.iter_mut().zip(&b[q * n..(q + 1) * n]) {
                *cv += aq * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `c += a · bᵀ` for `a[m,k]`, `b[n,k]`. Short products use row dots;
/// otherwise `b` is transposed once and the row-streaming kernel does the work.
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 0 || k == 0 {
        return;
    }
    if m < 4 {
        for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)).take(m) {
            for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
                *cv += dot(arow, brow);
            }
        }
        return;
    }
    let mut bt = vec![0.0; k * n];
    for (j, brow) in b.chunks_exact(k).enumerate().take(n) {
        for (p, &v) in brow.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    matmul_acc(a, &bt, c, m, k, n);
}

/// `c += aᵀ · b` for `a[m,k]`, `b[m,n]`, `c[k,n]`.
///
/// Four rows of `b` are folded into each pass over a row of `c`, keeping the
/// accumulation in increasing `i` order.
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 0 {
        return;
    }
    let mut i = 0;
    while i + 4 <= m {
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for (p, crow) in c.chunks_exact_mut(n).enumerate().take(k) {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            for ((((cv, &x0), &x1), &x2), &x3) in crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *cv = *cv + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
        }
        i += 4;
    }
    for i in i..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, crow) in c.chunks_exact_mut(n).enumerate().take(k) {
            let aip = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a tensor as an input. Its gradient is tracked when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims("matmul", ta)?;
        let (k2, n) = dims("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims("matmul_nt", ta)?;
        let (n, k2) = dims("matmul_nt", tb)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims("transpose", ta)?;
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row to every row of `a[m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = dims("add_row", ta)?;
        if tr.numel() != n {
            return Err(mismatch("add_row", ta, tr));
        }
        let r = tr.data();
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    /// Scales row `i` of `a[m, n]` by `col[i]` where `col` is `[m, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = dims("mul_col", ta)?;
        if tc.numel() != m {
            return Err(mismatch("mul_col", ta, tc));
        }
        let c = tc.data();
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o *= c[i];
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(&[a, col]);
        Ok(self.push(t, Op::MulCol(a, col), ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(&[a]);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows), with max
    /// subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims("softmax", ta)?;
        let mut out = ta.data().to_vec();
        match axis {
            1 => {
                for i in 0..m {
                    softmax_in_place(&mut out[i * n..(i + 1) * n]);
                }
            }
            0 => {
                let mut col = vec![0.0; m];
                for j in 0..n {
                    for i in 0..m {
                        col[i] = out[i * n + j];
                    }
                    softmax_in_place(&mut col);
                    for i in 0..m {
                        out[i * n + j] = col[i];
                    }
                }
            }
            _ => return Err(TensorError::InvalidAxis { op: "softmax", axis }),
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Softmax(a, axis), ng))
    }

    /// Row-wise layer normalization with affine `gain`/`bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = dims("layer_norm", tx)?;
        if tg.numel() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.numel() != n {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let (g, b) = (tg.data(), tb.data());
        let d = tx.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout. `p == 0` records an identity scale without drawing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let tx = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = tx.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::Dropout(x, mask), ng))
    }

    /// Gathers rows of `table[V, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = dims("embedding", tt)?;
        if indices.is_empty() {
            return Err(TensorError::Empty { op: "embedding" });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: ix,
                    extent: v,
                });
            }
            out.extend_from_slice(&tt.data()[ix * d..(ix + 1) * d]);
        }
        let t = Tensor::matrix(indices.len(), d, out)?;
        let ng = self.needs(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenates matrices along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let (r0, c0) = dims("concat", self.value(first))?;
        let t = match axis {
            0 => {
                let mut rows = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let tp = self.value(p);
                    let (r, c) = dims("concat", tp)?;
                    if c != c0 {
                        return Err(mismatch("concat", self.value(first), tp));
                    }
                    rows += r;
                    out.extend_from_slice(tp.data());
                }
                Tensor::matrix(rows, c0, out)?
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let (r, c) = dims("concat", tp)?;
                    if r != r0 {
                        return Err(mismatch("concat", self.value(first), tp));
                    }
                    cols += c;
                }
                let mut out = vec![0.0; r0 * cols];
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let c = tp.cols();
                    for i in 0..r0 {
                        out[i * cols + off..i * cols + off + c].copy_from_slice(tp.row_slice(i));
                    }
                    off += c;
                }
                Tensor::matrix(r0, cols, out)?
            }
            _ => return Err(TensorError::InvalidAxis { op: "concat", axis }),
        };
        let ng = self.needs(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `len` consecutive rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims("slice", tx)?;
        let extent = if axis == 0 { m } else { n };
        if axis > 1 {
            return Err(TensorError::InvalidAxis { op: "slice", axis });
        }
        if len == 0 || start + len > extent {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                extent,
            });
        }
        let t = if axis == 0 {
            Tensor::matrix(len, n, tx.data()[start * n..(start + len) * n].to_vec())?
        } else {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&tx.row_slice(i)[start..start + len]);
            }
            Tensor::matrix(m, len, out)?
        };
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, ng))
    }

    /// Elementwise maximum over rows: `[L, d] -> [1, d]`. Ties route the
    /// gradient to the first maximal row.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims("max_pool_rows", tx)?;
        if m == 0 {
            return Err(TensorError::Empty { op: "max_pool_rows" });
        }
        let d = tx.data();
        let mut out = d[..n].to_vec();
        let mut argmax = vec![0usize; n];
        for i in 1..m {
            for j in 0..n {
                if d[i * n + j] > out[j] {
                    out[j] = d[i * n + j];
                    argmax[j] = i;
                }
            }
        }
        let t = Tensor::matrix(1, n, out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::MaxPoolRows { x, argmax }, ng))
    }

    /// Normalizes each row to unit L2 norm. An exactly-zero row stays zero and
    /// passes no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims("l2_normalize_rows", tx)?;
        let mut out = tx.data().to_vec();
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = dot(row, row).sqrt();
            norms[i] = norm;
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::L2NormRows { x, norms }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Sums over `axis`: 0 gives `[1, n]` column totals, 1 gives `[m, 1]` row totals.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims("sum_axis", tx)?;
        let d = tx.data();
        let t = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += d[i * n + j];
                    }
                }
                Tensor::matrix(1, n, out)?
            }
            1 => Tensor::matrix(m, 1, (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect())?,
            _ => return Err(TensorError::InvalidAxis { op: "sum_axis", axis }),
        };
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::SumAxis(x, axis), ng))
    }

    /// Records the output of an externally-defined op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ng = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients are stored on every node
    /// that requires one and can be read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let tl = self.value(loss);
        if tl.numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                tl.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, &nodes[i], &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.needs_grad {
                node.value.grad = g;
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_nt_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn_acc(val(*a).data(), g, gb, m, k, n);
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).rows();
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn_acc(g, val(*a).data(), gb, m, n, k);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(db) {
                    *x += gi * bi;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(da) {
                    *x += gi * ai;
                }
            }
        }
        Op::AddRow(a, row) => {
            let n = val(*row).numel();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::MulCol(a, col) => {
            let (m, n) = val(*a).dims2().unwrap();
            let (da, dc) = (val(*a).data(), val(*col).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[i * n + j] * dc[i];
                    }
                }
            }
            if let Some(gc) = slot(nodes, grads, *col) {
                for i in 0..m {
                    gc[i] += dot(&g[i * n..(i + 1) * n], &da[i * n..(i + 1) * n]);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::Gelu(a) => {
            let da = val(*a).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(da) {
                    *x += gi * gelu_grad(*ai);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * y * (1.0 - y);
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (m, n) = out.dims2().unwrap();
            let y = out.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                if *axis == 1 {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let s = dot(&g[r.clone()], &y[r.clone()]);
                        for j in r {
                            ga[j] += y[j] * (g[j] - s);
                        }
                    }
                } else {
                    for j in 0..n {
                        let s: f64 = (0..m).map(|i| g[i * n + j] * y[i * n + j]).sum();
                        for i in 0..m {
                            ga[i * n + j] += y[i * n + j] * (g[i * n + j] - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (m, n) = val(*x).dims2().unwrap();
            let gd = val(*gain).data();
            if let Some(gg) = slot(nodes, grads, *gain) {
                for i in 0..m {
                    for j in 0..n {
                        gg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for chunk in g.chunks(n) {
                    gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let nf = n as f64;
                let mut dh = vec![0.0; n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    for j in 0..n {
                        dh[j] = g[i * n + j] * gd[j];
                    }
                    let s1: f64 = dh.iter().sum();
                    let s2 = dot(&dh, &xhat[r.clone()]);
                    for j in 0..n {
                        gx[i * n + j] +=
                            inv_std[i] / nf * (nf * dh[j] - s1 - xhat[i * n + j] * s2);
                    }
                }
            }
        }
        Op::Dropout(x, mask) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, gi), mi) in gx.iter_mut().zip(g).zip(mask) {
                    *a += gi * mi;
                }
            }
        }
        Op::Embedding { table, indices } => {
            let d = val(*table).cols();
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[ix * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let total_cols = out.cols();
            let mut off = 0;
            for p in parts {
                let (r, c) = val(*p).dims2().unwrap();
                if let Some(gp) = slot(nodes, grads, *p) {
                    if *axis == 0 {
                        gp.iter_mut()
                            .zip(&g[off * c..(off + r) * c])
                            .for_each(|(a, b)| *a += b);
                    } else {
                        for i in 0..r {
                            let src = &g[i * total_cols + off..i * total_cols + off + c];
                            gp[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
                off += if *axis == 0 { r } else { c };
            }
        }
        Op::Slice { x, axis, start } => {
            let (m, n) = val(*x).dims2().unwrap();
            let (om, on) = out.dims2().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                if *axis == 0 {
                    gx[start * n..(start + om) * n]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                } else {
                    for i in 0..m {
                        for j in 0..on {
                            gx[i * n + start + j] += g[i * on + j];
                        }
                    }
                }
            }
        }
        Op::MaxPoolRows { x, argmax } => {
            let n = val(*x).cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (j, &i) in argmax.iter().enumerate() {
                    gx[i * n + j] += g[j];
                }
            }
        }
        Op::L2NormRows { x, norms } => {
            let (m, n) = out.dims2().unwrap();
            let y = out.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..m {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let r = i * n..(i + 1) * n;
                    let s = dot(&y[r.clone()], &g[r.clone()]);
                    for j in r {
                        gx[j] += (g[j] - y[j] * s) / norms[i];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::SumAxis(x, axis) => {
            let (m, n) = val(*x).dims2().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += if *axis == 0 { g[j] } else { g[i] };
                    }
                }
            }
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
            let mut local: Vec<Option<Vec<f64>>> = inputs
                .iter()
                .map(|v| nodes[v.0].needs_grad.then(|| vec![0.0; val(*v).numel()]))
                .collect();
            op.backward(&ins, out, g, &mut local);
            for (v, lg) in inputs.iter().zip(local) {
                if let (Some(lg), Some(gv)) = (lg, slot(nodes, grads, *v)) {
                    gv.iter_mut().zip(&lg).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}
