use super::kernels;
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherElems {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    LogAddExp(Vec<Var>),
    SegmentMean {
        x: Var,
        spans: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitive ops.
///
/// Nodes are appended as ops run, so inputs always precede outputs and the
/// reverse sweep in [`Tape::backward`] is a single pass from the root down.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the var does not require grad or the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros of length `len` for missing entries.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = kernels::matmul(m, k, n, ta.data(), tb.data(), trans_b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_ex(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `1×d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.len() != tx.cols() {
            return Err(mismatch("add_row", tx, tr));
        }
        let mut data = tx.data().to_vec();
        kernels::add_row_inplace(&mut data, tr.data());
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// Row-wise softmax; `allowed` (same length as `x`) zeroes masked entries.
    pub fn softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if let Some(m) = allowed {
            if m.len() != tx.len() {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("mask has {} entries for {} values", m.len(), tx.len()),
                });
            }
        }
        let data = kernels::softmax_rows(tx.data(), tx.cols(), allowed);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = kernels::log_softmax_rows(tx.data(), tx.cols());
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let (y, xhat, inv_std) = kernels::layer_norm_rows(tx.data(), d, tg.data(), tb.data(), eps);
        let t = Tensor::new(tx.shape().to_vec(), y)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows of `x` (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::OutOfRange {
                    op: "gather_rows",
                    index: r,
                    extent: n,
                });
            }
            data.extend_from_slice(tx.row(r));
        }
        let t = Tensor::matrix(rows.len(), d, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Picks flat elements of `x` into a `1×len` row; `None` yields `fill`.
    pub fn gather(&mut self, x: Var, index: &[Option<usize>], fill: f64) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let mut data = Vec::with_capacity(index.len());
        for i in index {
            match *i {
                Some(j) if j >= tx.len() => {
                    return Err(TensorError::OutOfRange {
                        op: "gather",
                        index: j,
                        extent: tx.len(),
                    })
                }
                Some(j) => data.push(tx.data()[j]),
                None => data.push(fill),
            }
        }
        let t = Tensor::matrix(1, index.len(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::GatherElems {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let d = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, d, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_cols", first, self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if len == 0 || start + len > tx.rows() {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: tx.rows(),
            });
        }
        let d = tx.cols();
        let t = Tensor::matrix(len, d, tx.data()[start * d..(start + len) * d].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let d = tx.cols();
        if len == 0 || start + len > d {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: d,
            });
        }
        let data = (0..tx.rows())
            .flat_map(|r| tx.row(r)[start..start + len].iter().copied())
            .collect();
        let t = Tensor::matrix(tx.rows(), len, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Elementwise `log Σ_k exp(parts[k])` over same-shape inputs.
    pub fn log_add_exp(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        for &p in parts {
            if self.value(p).shape() != first.shape() {
                return Err(mismatch("log_add_exp", first, self.value(p)));
            }
        }
        let n = first.len();
        let mut buf = vec![0.0; parts.len()];
        let data = (0..n)
            .map(|i| {
                for (b, &p) in buf.iter_mut().zip(parts) {
                    *b = self.value(p).data()[i];
                }
                kernels::log_sum_exp(&buf)
            })
            .collect();
        let t = Tensor::new(first.shape().to_vec(), data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::LogAddExp(parts.to_vec()), rg))
    }

    /// Averages rows over each inclusive span `(start, end)`, one output row per span.
    pub fn segment_mean(&mut self, x: Var, spans: &[(usize, usize)]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let d = tx.cols();
        let mut data = vec![0.0; spans.len() * d];
        for (s, &(a, b)) in spans.iter().enumerate() {
            if a > b || b >= tx.rows() {
                return Err(TensorError::OutOfRange {
                    op: "segment_mean",
                    index: b,
                    extent: tx.rows(),
                });
            }
            let out = &mut data[s * d..(s + 1) * d];
            for t in a..=b {
                for (o, v) in out.iter_mut().zip(tx.row(t)) {
                    *o += v;
                }
            }
            let len = (b - a + 1) as f64;
            out.iter_mut().for_each(|o| *o /= len);
        }
        let t = Tensor::matrix(spans.len(), d, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SegmentMean {
                x,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        // Returns the accumulator for `v`, or None when `v` needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                if let Some(da) = acc!(*a) {
                    // dA = G · op(B)ᵀ
                    kernels::gemm(m, n, k, g, false, tb.data(), !trans_b, da, true);
                }
                if let Some(db) = acc!(*b) {
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        kernels::gemm(n, m, k, g, true, ta.data(), false, db, true);
                    } else {
                        // dB = Aᵀ · G
                        kernels::gemm(k, m, n, ta.data(), true, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc!(v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(da) = acc!(*a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += g * y;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(dr) = acc!(*row) {
                    let c = dr.len();
                    for gr in g.chunks(c) {
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = acc!(*x) {
                    let c = out.cols();
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let s: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(dx) = acc!(*x) {
                    let c = out.cols();
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        if s == 0.0 {
                            dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                            continue;
                        }
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += g - y.exp() * s;
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
                let c = out.cols();
                let tg = self.value(*gain);
                if let Some(dg) = acc!(*gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, g), h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += g * h;
                        }
                    }
                }
                if let Some(db) = acc!(*bias) {
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let mut dh = vec![0.0; c];
                    for (r, (dr, gr)) in dx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let hr = &xhat[r * c..(r + 1) * c];
                        for ((o, g), w) in dh.iter_mut().zip(gr).zip(tg.data()) {
                            *o = g * w;
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((d, o), h) in dr.iter_mut().zip(&dh).zip(hr) {
                            *d += inv_std[r] * (o - mean_dh - h * mean_dhh);
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(dx) = acc!(*x) {
                    let c = out.cols();
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, g) in dx[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *d += g;
                        }
                    }
                }
            }
            Op::GatherElems { x, index } => {
                if let Some(dx) = acc!(*x) {
                    for (i, j) in index.iter().enumerate() {
                        if let Some(j) = j {
                            dx[*j] += g[i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(dp) = acc!(p) {
                        dp.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(dp) = acc!(p) {
                        for (r, dr) in dp.chunks_mut(c).enumerate() {
                            let gr = &g[r * total + off..r * total + off + c];
                            dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(dx) = acc!(*x) {
                    let off = start * out.cols();
                    dx[off..off + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                if let Some(dx) = acc!(*x) {
                    let c = self.nodes[x.0].value.cols();
                    for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(len)) {
                        dr[*start..start + len].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LogAddExp(parts) => {
                for &p in parts {
                    let pv = self.value(p).data();
                    if let Some(dp) = acc!(p) {
                        for (i, d) in dp.iter_mut().enumerate() {
                            let o = out.data()[i];
                            if o != f64::NEG_INFINITY && pv[i] != f64::NEG_INFINITY {
                                *d += g[i] * (pv[i] - o).exp();
                            }
                        }
                    }
                }
            }
            Op::SegmentMean { x, spans } => {
                if let Some(dx) = acc!(*x) {
                    let c = out.cols();
                    for (s, &(a, b)) in spans.iter().enumerate() {
                        let w = 1.0 / (b - a + 1) as f64;
                        for t in a..=b {
                            for (d, g) in dx[t * c..(t + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                                *d += w * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(m(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut t = Tape::new();
        let a = t.constant(m(&[vec![1.0, 2.0]]));
        let b = t.constant(m(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![4, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(m(&[vec![1.0, -2.0, 3.0]]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_dot_product() {
        let mut t = Tape::new();
        let x = t.param(m(&[vec![1.0, 2.0, 3.0]]));
        let y = t.param(m(&[vec![4.0, 5.0, 6.0]]));
        let p = t.mul(x, y).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.get(y).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 2]));
        assert_eq!(t.backward(x).unwrap_err(), TensorError::NonScalarRoot(vec![2, 2]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(m(&[vec![1.0, 2.0]]));
        let c = t.constant(m(&[vec![3.0, 4.0]]));
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 0.0]]));
        let y = t.softmax(x, None).unwrap();
        let v = t.value(y);
        for j in 0..3 {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        // direct exp/sum oracle for [1, 2]
        let two = t.constant(m(&[vec![1.0, 2.0]]));
        let p = t.softmax(two, None).unwrap();
        let z = 1f64.exp() + 2f64.exp();
        assert!((t.value(p).at(0, 0) - 1f64.exp() / z).abs() < 1e-15);
        assert!((t.value(p).at(0, 0) - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((t.value(p).at(0, 1) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::filled(&[1, 2], 1.0));
        let b = t.constant(Tensor::zeros(&[1, 2]));
        let x = t.constant(m(&[vec![1.0, 3.0], vec![5.0, 5.0]]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let v = t.value(y);
        assert!((v.at(0, 0) + 1.0).abs() < 1e-9 && (v.at(0, 1) - 1.0).abs() < 1e-9);
        assert_eq!(v.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn segment_mean_averages_spans() {
        let mut t = Tape::new();
        let x = t.param(m(&[vec![1.0], vec![3.0], vec![5.0], vec![7.0]]));
        let y = t.segment_mean(x, &[(0, 1), (3, 3)]).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 7.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.5, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn log_add_exp_handles_neg_infinity() {
        let mut t = Tape::new();
        let a = t.param(m(&[vec![f64::NEG_INFINITY, 0.0]]));
        let b = t.param(m(&[vec![f64::NEG_INFINITY, 0.0]]));
        let c = t.log_add_exp(&[a, b]).unwrap();
        assert_eq!(t.value(c).at(0, 0), f64::NEG_INFINITY);
        assert!((t.value(c).at(0, 1) - 2f64.ln()).abs() < 1e-15);
        let keep = t.gather(c, &[Some(1)], 0.0).unwrap();
        let s = t.sum(keep);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.5]);
    }
}
