//! Tape-based reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Graph`] records every op as a node holding its forward value. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and leaves
//! gradients on every node that (transitively) depends on a leaf.
//!
//! Most ops view a tensor as a matrix whose column count is the last
//! dimension and whose row count is the product of the others.

use crate::error::{shape_err, LmError, Result};
use crate::scalar::{gemm, Scalar, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![S::zero(); n] }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::lit(x)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            r => self.shape[..r - 1].iter().product(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu2(Var),
    Sigmoid(Var),
    Tanh(Var),
    RmsNorm { x: Var, group: usize, inv: Vec<S> },
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Sum(Var),
    Mean(Var),
    Rope { x: Var, seq: usize, heads: usize },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<S> },
    GatherRows { x: Var, idx: Vec<usize> },
    IndexAddRows { base: Var, src: Var, idx: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    GatherElems { x: Var, idx: Vec<(usize, usize)> },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    check_finite: bool,
}

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), check_finite: false }
    }

    /// Every op output is scanned for NaN/inf and rejected with
    /// [`LmError::NonFinite`].
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &str) -> Result<Var> {
        if self.check_finite && value.data.iter().any(|x| !x.is_finite()) {
            return Err(LmError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient accumulated by the last [`Graph::backward`]; `None` when no
    /// gradient reached the node.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(shape_err(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<S>, name: &str, f: impl Fn(S) -> S) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| f(v)).collect() };
        let rg = self.rg(&[x]);
        self.push(out, op, rg, name)
    }

    /// `[.., k] x [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape.len() != 2 || ta.cols() != tb.shape[0] {
            return Err(shape_err(format!("matmul: {:?} x {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape[1]);
        let mut data = vec![S::zero(); m * n];
        gemm(S::one(), View::row_major(&ta.data, m, k), View::row_major(&tb.data, k, n), S::zero(), &mut data, n, 1);
        let mut shape = ta.shape.clone();
        *shape.last_mut().expect("non-scalar") = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor { shape, data }, Op::Matmul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = S::lit(s);
        self.unary(x, Op::Scale(x, s), "scale", |v| v * s)
    }

    /// `max(x, 0)^2`
    pub fn relu2(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu2(x), "relu2", |v| {
            let r = v.max(S::zero());
            r * r
        })
    }

    /// Logistic function, clamped to stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let lo = S::epsilon();
        let hi = S::one() - S::epsilon();
        self.unary(x, Op::Sigmoid(x), "sigmoid", |v| (S::one() / (S::one() + (-v).exp())).max(lo).min(hi))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), "tanh", |v| v.tanh())
    }

    /// `cap * tanh(x / cap)`
    pub fn softcap(&mut self, x: Var, cap: f64) -> Result<Var> {
        if !(cap > 0.0) {
            return Err(LmError::InvalidInput(format!("softcap {cap} must be positive")));
        }
        let s = self.scale(x, 1.0 / cap)?;
        let t = self.tanh(s)?;
        self.scale(t, cap)
    }

    /// `x / sqrt(mean(x^2) + eps)` over consecutive groups of `group` values
    /// in each row.
    pub fn rmsnorm(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if group == 0 || t.cols() % group != 0 {
            return Err(shape_err(format!("rmsnorm: group {group} does not divide {}", t.cols())));
        }
        let eps = S::lit(RMS_EPS);
        let gs = S::lit(group as f64);
        let mut data = vec![S::zero(); t.len()];
        let mut inv = Vec::with_capacity(t.len() / group);
        for (src, dst) in t.data.chunks(group).zip(data.chunks_mut(group)) {
            let ms = src.iter().map(|&v| v * v).sum::<S>() / gs;
            let r = S::one() / (ms + eps).sqrt();
            inv.push(r);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * r;
            }
        }
        let out = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(&[x]);
        self.push(out, Op::RmsNorm { x, group, inv }, rg, "rmsnorm")
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(shape_err(format!("embedding table must be 2-D, got {:?}", t.shape)));
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(LmError::InvalidInput(format!("token id {bad} >= vocab {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let out = Tensor { shape: vec![ids.len(), d], data };
        let rg = self.rg(&[table]);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg, "embedding")
    }

    /// Per-row negative log-likelihood of `targets` under softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(shape_err(format!("cross_entropy: {n} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= v) {
            return Err(LmError::InvalidInput(format!("target {bad} >= vocab {v}")));
        }
        let mut probs = t.data.clone();
        let mut data = Vec::with_capacity(n);
        for (row, &y) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            data.push(lse - row[y]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let out = Tensor { shape: vec![n], data };
        let rg = self.rg(&[logits]);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg, "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().copied().sum::<S>();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape: vec![1], data: vec![s] }, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean of empty tensor"));
        }
        let s = t.data.iter().copied().sum::<S>() / S::lit(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor { shape: vec![1], data: vec![s] }, Op::Mean(x), rg, "mean")
    }

    /// Rotary position embedding on `[B*T, heads*hd]`; the row's position is
    /// `row % seq`, and dimension `j` of each head pairs with `j + hd/2`.
    pub fn rope(&mut self, x: Var, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        check_heads(cols, heads, "rope")?;
        if seq == 0 || rows % seq != 0 {
            return Err(shape_err(format!("rope: {rows} rows not a multiple of seq {seq}")));
        }
        let hd = cols / heads;
        if hd % 2 != 0 {
            return Err(shape_err(format!("rope: head dim {hd} must be even")));
        }
        let mut data = t.data.clone();
        rotate(&mut data, rows, cols, seq, heads, false);
        let out = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(&[x]);
        self.push(out, Op::Rope { x, seq, heads }, rg, "rope")
    }

    /// Multi-head causal softmax attention with scale `1/sqrt(hd)`. Inputs are
    /// `[B*T, heads*hd]` with rows grouped by sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (tq.rows(), tq.cols());
        check_heads(d, heads, "attention")?;
        if seq == 0 || rows % seq != 0 {
            return Err(shape_err(format!("attention: {rows} rows not a multiple of seq {seq}")));
        }
        let hd = d / heads;
        let scale = S::lit(1.0 / (hd as f64).sqrt());
        let nb = rows / seq;
        let mut out = vec![S::zero(); rows * d];
        let mut probs = vec![S::zero(); nb * heads * seq * seq];
        for b in 0..nb {
            for h in 0..heads {
                let off = b * seq * d + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    scale,
                    View { data: &tq.data[off..], rows: seq, cols: hd, rs: d, cs: 1 },
                    View { data: &tk.data[off..], rows: hd, cols: seq, rs: 1, cs: d },
                    S::zero(),
                    p,
                    seq,
                    1,
                );
                for (i, row) in p.chunks_mut(seq).enumerate() {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = S::zero());
                }
                gemm(
                    S::one(),
                    View::row_major(p, seq, seq),
                    View { data: &tv.data[off..], rows: seq, cols: hd, rs: d, cs: 1 },
                    S::zero(),
                    &mut out[off..],
                    d,
                    1,
                );
            }
        }
        let out = Tensor { shape: tq.shape.clone(), data: out };
        let rg = self.rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, seq, heads, probs }, rg, "attention")
    }

    /// Rows of a 2-D tensor, in `idx` order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err(format!("gather_rows: row {bad} >= {r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor { shape: vec![idx.len(), c], data }, Op::GatherRows { x, idx: idx.to_vec() }, rg, "gather_rows")
    }

    /// `base` with row `idx[j]` incremented by row `j` of `src`.
    pub fn index_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let (r, c) = (tb.rows(), tb.cols());
        if ts.cols() != c || ts.rows() != idx.len() {
            return Err(shape_err(format!("index_add_rows: src {:?} for {} indices into {:?}", ts.shape, idx.len(), tb.shape)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err(format!("index_add_rows: row {bad} >= {r}")));
        }
        let mut data = tb.data.clone();
        for (j, &i) in idx.iter().enumerate() {
            for (d, &s) in data[i * c..(i + 1) * c].iter_mut().zip(&ts.data[j * c..(j + 1) * c]) {
                *d = *d + s;
            }
        }
        let out = Tensor { shape: tb.shape.clone(), data };
        let rg = self.rg(&[base, src]);
        self.push(out, Op::IndexAddRows { base, src, idx: idx.to_vec() }, rg, "index_add_rows")
    }

    /// Row `j` of `x` times `s[j]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = (tx.rows(), tx.cols());
        if ts.len() != r {
            return Err(shape_err(format!("scale_rows: {r} rows, {} scales", ts.len())));
        }
        let mut data = tx.data.clone();
        for (row, &f) in data.chunks_mut(c.max(1)).zip(&ts.data) {
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        let out = Tensor { shape: tx.shape.clone(), data };
        let rg = self.rg(&[x, s]);
        self.push(out, Op::ScaleRows { x, s }, rg, "scale_rows")
    }

    /// Entries `x[row, col]` of a 2-D tensor as a vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(shape_err(format!("gather_elems: {bad:?} outside {r}x{c}")));
        }
        let data = idx.iter().map(|&(i, j)| t.data[i * c + j]).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape: vec![idx.len()], data }, Op::GatherElems { x, idx: idx.to_vec() }, rg, "gather_elems")
    }

    /// Reverse sweep from a single-element `loss`. Gradients from any
    /// previous sweep are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward needs a scalar, got {:?}", self.value(loss).shape)));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&self.nodes, i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn check_heads(cols: usize, heads: usize, op: &str) -> Result<()> {
    if heads == 0 || cols % heads != 0 {
        return Err(shape_err(format!("{op}: {cols} columns not divisible into {heads} heads")));
    }
    Ok(())
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z = z + *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

/// Applies the rotary rotation (or its inverse) in place.
fn rotate<S: Scalar>(data: &mut [S], rows: usize, cols: usize, seq: usize, heads: usize, inverse: bool) {
    let hd = cols / heads;
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half).map(|j| ROPE_BASE.powf(-2.0 * j as f64 / hd as f64)).collect();
    for r in 0..rows {
        let pos = (r % seq) as f64;
        let trig: Vec<(S, S)> = freqs
            .iter()
            .map(|&f| {
                let (s, c) = (pos * f).sin_cos();
                (S::lit(c), S::lit(if inverse { -s } else { s }))
            })
            .collect();
        let row = &mut data[r * cols..(r + 1) * cols];
        for h in 0..heads {
            let head = &mut row[h * hd..(h + 1) * hd];
            for (j, &(c, s)) in trig.iter().enumerate() {
                let (a, b) = (head[j], head[j + half]);
                head[j] = a * c - b * s;
                head[j + half] = a * s + b * c;
            }
        }
    }
}

fn acc<'a, S: Scalar>(nodes: &[Node<S>], grads: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

fn acc_elementwise<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], v: Var, f: impl Fn(usize) -> S) {
    if let Some(gv) = acc(nodes, grads, v) {
        for (j, x) in gv.iter_mut().enumerate() {
            *x = *x + f(j);
        }
    }
}

fn backprop<S: Scalar>(nodes: &[Node<S>], i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let y = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.shape[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm(S::one(), View::row_major(g, m, n), View::transposed(&tb.data, k, n), S::one(), ga, k, 1);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm(S::one(), View::transposed(&ta.data, m, k), View::row_major(g, m, n), S::one(), gb, n, 1);
            }
        }
        Op::Add(a, b) => {
            acc_elementwise(nodes, grads, *a, |j| g[j]);
            acc_elementwise(nodes, grads, *b, |j| g[j]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
            acc_elementwise(nodes, grads, *a, |j| g[j] * vb[j]);
            acc_elementwise(nodes, grads, *b, |j| g[j] * va[j]);
        }
        Op::Scale(x, s) => acc_elementwise(nodes, grads, *x, |j| g[j] * *s),
        Op::Relu2(x) => {
            let vx = &nodes[x.0].value.data;
            let two = S::lit(2.0);
            acc_elementwise(nodes, grads, *x, |j| g[j] * two * vx[j].max(S::zero()));
        }
        Op::Sigmoid(x) => acc_elementwise(nodes, grads, *x, |j| g[j] * y.data[j] * (S::one() - y.data[j])),
        Op::Tanh(x) => acc_elementwise(nodes, grads, *x, |j| g[j] * (S::one() - y.data[j] * y.data[j])),
        Op::RmsNorm { x, group, inv } => {
            let vx = &nodes[x.0].value.data;
            let gs = S::lit(*group as f64);
            if let Some(gx) = acc(nodes, grads, *x) {
                for (c, &r) in inv.iter().enumerate() {
                    let span = c * group..(c + 1) * group;
                    let dot = span.clone().map(|j| g[j] * vx[j]).sum::<S>() / gs;
                    for j in span {
                        gx[j] = gx[j] + r * (g[j] - vx[j] * r * r * dot);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let c = y.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((yr, gr), out) in y.data.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = *o + yv * (gv - dot);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.cols();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o = *o + gv;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = nodes[logits.0].value.cols();
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &tgt) in targets.iter().enumerate() {
                    let row = &mut gl[r * v..(r + 1) * v];
                    for (j, o) in row.iter_mut().enumerate() {
                        let onehot = if j == tgt { S::one() } else { S::zero() };
                        *o = *o + g[r] * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
        Op::Sum(x) => acc_elementwise(nodes, grads, *x, |_| g[0]),
        Op::Mean(x) => {
            let n = S::lit(nodes[x.0].value.len() as f64);
            acc_elementwise(nodes, grads, *x, |_| g[0] / n);
        }
        Op::Rope { x, seq, heads } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let mut back = g.to_vec();
                rotate(&mut back, y.rows(), y.cols(), *seq, *heads, true);
                gx.iter_mut().zip(back).for_each(|(o, v)| *o = *o + v);
            }
        }
        Op::Attention { q, k, v, seq, heads, probs } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), *seq, *heads, probs);
        }
        Op::GatherRows { x, idx } => {
            let c = y.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (j, &r) in idx.iter().enumerate() {
                    for (o, &gv) in gx[r * c..(r + 1) * c].iter_mut().zip(&g[j * c..(j + 1) * c]) {
                        *o = *o + gv;
                    }
                }
            }
        }
        Op::IndexAddRows { base, src, idx } => {
            let c = y.cols();
            acc_elementwise(nodes, grads, *base, |j| g[j]);
            if let Some(gs) = acc(nodes, grads, *src) {
                for (j, &r) in idx.iter().enumerate() {
                    for (o, &gv) in gs[j * c..(j + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o = *o + gv;
                    }
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let c = y.cols().max(1);
            let (vx, vs) = (&nodes[x.0].value.data, &nodes[s.0].value.data);
            acc_elementwise(nodes, grads, *x, |j| g[j] * vs[j / c]);
            if let Some(gsv) = acc(nodes, grads, *s) {
                for (r, o) in gsv.iter_mut().enumerate() {
                    let dot = (r * c..(r + 1) * c).map(|j| g[j] * vx[j]).sum::<S>();
                    *o = *o + dot;
                }
            }
        }
        Op::GatherElems { x, idx } => {
            let c = nodes[x.0].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (j, &(r, col)) in idx.iter().enumerate() {
                    gx[r * c + col] = gx[r * c + col] + g[j];
                }
            }
        }
    }
}

fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    g: &[S],
    (q, k, v): (Var, Var, Var),
    seq: usize,
    heads: usize,
    probs: &[S],
) {
    let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let (rows, d) = (tq.rows(), tq.cols());
    let hd = d / heads;
    let scale = S::lit(1.0 / (hd as f64).sqrt());
    let nb = rows / seq;
    let mut gq = vec![S::zero(); rows * d];
    let mut gk = vec![S::zero(); rows * d];
    let mut gv = vec![S::zero(); rows * d];
    let mut dp = vec![S::zero(); seq * seq];
    for b in 0..nb {
        for h in 0..heads {
            let off = b * seq * d + h * hd;
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            let go = View { data: &g[off..], rows: seq, cols: hd, rs: d, cs: 1 };
            // dP = dO V^T
            gemm(S::one(), go, View { data: &tv.data[off..], rows: hd, cols: seq, rs: 1, cs: d }, S::zero(), &mut dp, seq, 1);
            // dV += P^T dO
            gemm(S::one(), View::transposed(p, seq, seq), go, S::one(), &mut gv[off..], d, 1);
            // dS = P * (dP - rowsum(dP * P)), scaled
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum::<S>();
                for j in 0..seq {
                    dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { S::zero() };
                }
            }
            // dQ += dS K ; dK += dS^T Q
            gemm(
                S::one(),
                View::row_major(&dp, seq, seq),
                View { data: &tk.data[off..], rows: seq, cols: hd, rs: d, cs: 1 },
                S::one(),
                &mut gq[off..],
                d,
                1,
            );
            gemm(
                S::one(),
                View::transposed(&dp, seq, seq),
                View { data: &tq.data[off..], rows: seq, cols: hd, rs: d, cs: 1 },
                S::one(),
                &mut gk[off..],
                d,
                1,
            );
        }
    }
    for (var, local) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(acc) = acc(nodes, grads, var) {
            acc.iter_mut().zip(local).for_each(|(o, x)| *o = *o + x);
        }
    }
}
