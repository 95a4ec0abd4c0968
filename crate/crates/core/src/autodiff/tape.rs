//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse insertion order, so traversal is deterministic
//! and a node's gradient is complete before it is propagated. Nodes that do
//! not depend on any gradient-requiring leaf are skipped on the way back.

use super::kernels;
use super::Tensor;
use crate::{Error, Result, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows { input: Var, inv_temp: T },
    NormalizeRows { input: Var, norms: Vec<T> },
    GatherRows { input: Var, index: Vec<usize> },
    ConcatRows(Var, Var),
    SeqAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        scale: T,
        probs: Vec<T>,
    },
    PrefixAttention {
        q: Var,
        k: Var,
        v: Var,
        prefix_k: Var,
        prefix_v: Var,
        prefix_len: usize,
        shared: bool,
        scale: T,
        probs: Vec<T>,
    },
    MeanPool { input: Var, seq_len: usize },
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// ∂loss/∂var, or `None` when `var` does not influence the loss through
    /// any differentiable path.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records `t` as an input. Gradients flow back to it only when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let op = if t.requires_grad() { Op::Leaf } else { Op::Constant };
        self.push(t.rows(), t.cols(), t.data().to_vec(), op, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_parts(vec![n.rows, n.cols], n.value.clone())
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Dimension {
                op,
                left: vec![da.0, da.1],
                right: vec![db.0, db.1],
            });
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`, the row-vector form of applying weight `b` to the rows of `a`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(self.value(a), self.value(b), m, k, n, &mut out);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = kernels::transpose(self.value(a), r, c);
        let ng = self.needs(&[a]);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Vec<T>)> {
        let (r, c) = self.same_dims(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((r, c, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, op, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        self.map(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, T::exp, Op::Exp(a))
    }

    /// Natural log with inputs clamped below at [`Scalar::log_floor`].
    /// Inputs under the floor receive zero gradient. NaN inputs are rejected.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(index) = self.value(a).iter().position(|x| x.is_nan()) {
            return Err(Error::Numeric { op: "log", index });
        }
        let floor = T::log_floor();
        Ok(self.map(a, |x| x.max(floor).ln(), Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, T::tanh, Op::Tanh(a))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.needs(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let ng = self.needs(&[a]);
        self.push(1, 1, vec![m], Op::Mean(a), ng)
    }

    /// Column-wise mean over rows: `n×K → 1×K`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r == 0 {
            return Err(Error::Contract("mean_rows over zero rows".into()));
        }
        let mut out = vec![T::zero(); c];
        for row in self.value(a).chunks_exact(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += *x;
            }
        }
        let inv = T::one() / T::lit(r as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        let ng = self.needs(&[a]);
        Ok(self.push(1, c, out, Op::MeanRows(a), ng))
    }

    /// Row-wise softmax of `a / temperature`, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::Domain(format!(
                "softmax temperature must be positive and finite, got {temperature}"
            )));
        }
        let (r, c) = self.dims(a);
        let inv_temp = T::one() / temperature;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = ((*x - max) * inv_temp).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(r, c, out, Op::SoftmaxRows { input: a, inv_temp }, ng))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let floor = T::lit(1e-12);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(r);
        for (row_idx, row) in out.chunks_exact_mut(c).enumerate() {
            let norm = row.iter().map(|x| *x * *x).sum::<T>().sqrt();
            if !(norm >= floor) {
                return Err(Error::DegenerateEmbedding {
                    row: row_idx,
                    norm: norm.as_f64(),
                });
            }
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(r, c, out, Op::NormalizeRows { input: a, norms }, ng))
    }

    /// Rows of `a` picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "gather_rows",
                left: vec![r, c],
                right: vec![bad],
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(
            index.len(),
            c,
            out,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// `a` stacked on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.dims(a), self.dims(b));
        if ca != cb {
            return Err(Error::Dimension {
                op: "concat_rows",
                left: vec![ra, ca],
                right: vec![rb, cb],
            });
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let ng = self.needs(&[a, b]);
        Ok(self.push(ra + rb, ca, out, Op::ConcatRows(a, b), ng))
    }

    /// Single-head scaled dot-product attention applied independently to
    /// consecutive blocks of `seq_len` rows.
    pub fn seq_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var> {
        self.block_attention(q, k, v, seq_len, false)
    }

    /// As [`Tape::seq_attention`], but row `i` of a block sees only rows `0..=i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var> {
        self.block_attention(q, k, v, seq_len, true)
    }

    fn block_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, causal: bool) -> Result<Var> {
        let (rows, dim) = self.same_dims("seq_attention", q, k)?;
        self.same_dims("seq_attention", q, v)?;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Dimension {
                op: "seq_attention",
                left: vec![rows, dim],
                right: vec![seq_len],
            });
        }
        let scale = T::one() / T::lit(dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let l = seq_len;
        let mut probs = vec![T::zero(); (rows / l) * l * l];
        let mut out = vec![T::zero(); rows * dim];
        for b in 0..rows / l {
            let span = b * l * dim..(b + 1) * l * dim;
            let p = &mut probs[b * l * l..(b + 1) * l * l];
            kernels::gemm_nt(&qv[span.clone()], &kv[span.clone()], l, dim, l, p);
            for (i, row) in p.chunks_exact_mut(l).enumerate() {
                let visible = if causal { i + 1 } else { l };
                softmax_in_place(&mut row[..visible], scale);
                row[visible..].iter_mut().for_each(|x| *x = T::zero());
            }
            kernels::gemm_nn(p, &vv[span.clone()], l, l, dim, &mut out[span]);
        }
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            rows,
            dim,
            out,
            Op::SeqAttention {
                q,
                k,
                v,
                seq_len,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Attention of each row over a prefix plus itself.
    ///
    /// `q`, `k`, `v` are `N×d`; `prefix_k` and `prefix_v` hold `G` prefixes
    /// of `prefix_len` rows each. With `G = 1` every row shares the prefix,
    /// with `G = N` row `i` uses prefix `i`. Row `i` attends over its
    /// prefix keys followed by `k_i`.
    pub fn prefix_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix_k: Var,
        prefix_v: Var,
        prefix_len: usize,
    ) -> Result<Var> {
        let (n, dim) = self.same_dims("prefix_attention", q, k)?;
        self.same_dims("prefix_attention", q, v)?;
        let (p, pd) = self.same_dims("prefix_attention", prefix_k, prefix_v)?;
        let groups = if prefix_len == 0 { 0 } else { p / prefix_len };
        if pd != dim || prefix_len == 0 || p % prefix_len != 0 || !(groups == 1 || groups == n) {
            return Err(Error::Dimension {
                op: "prefix_attention",
                left: vec![n, dim],
                right: vec![p, pd, prefix_len],
            });
        }
        let l = prefix_len;
        let w = l + 1;
        let scale = T::one() / T::lit(dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (pk, pv) = (self.value(prefix_k), self.value(prefix_v));
        let mut probs = vec![T::zero(); n * w];
        let mut out = vec![T::zero(); n * dim];
        for i in 0..n {
            let g = if groups == 1 { 0 } else { i };
            let qi = &qv[i * dim..(i + 1) * dim];
            let row = &mut probs[i * w..(i + 1) * w];
            for (j, slot) in row[..l].iter_mut().enumerate() {
                *slot = dot(qi, &pk[(g * l + j) * dim..(g * l + j + 1) * dim]);
            }
            row[l] = dot(qi, &kv[i * dim..(i + 1) * dim]);
            softmax_in_place(row, scale);
            let o = &mut out[i * dim..(i + 1) * dim];
            for (j, &pj) in row.iter().enumerate() {
                let src = if j < l {
                    &pv[(g * l + j) * dim..(g * l + j + 1) * dim]
                } else {
                    &vv[i * dim..(i + 1) * dim]
                };
                o.iter_mut().zip(src).for_each(|(d, s)| *d += pj * *s);
            }
        }
        let ng = self.needs(&[q, k, v, prefix_k, prefix_v]);
        Ok(self.push(
            n,
            dim,
            out,
            Op::PrefixAttention {
                q,
                k,
                v,
                prefix_k,
                prefix_v,
                prefix_len,
                shared: groups == 1,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Mean over consecutive blocks of `seq_len` rows: `(B·L)×d → B×d`.
    pub fn mean_pool(&mut self, a: Var, seq_len: usize) -> Result<Var> {
        let (rows, c) = self.dims(a);
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Dimension {
                op: "mean_pool",
                left: vec![rows, c],
                right: vec![seq_len],
            });
        }
        let blocks = rows / seq_len;
        let inv = T::one() / T::lit(seq_len as f64);
        let src = self.value(a);
        let mut out = vec![T::zero(); blocks * c];
        for (i, row) in src.chunks_exact(c).enumerate() {
            let dst = &mut out[(i / seq_len) * c..(i / seq_len + 1) * c];
            for (o, x) in dst.iter_mut().zip(row) {
                *o += *x;
            }
        }
        out.iter_mut().for_each(|x| *x *= inv);
        let ng = self.needs(&[a]);
        Ok(self.push(blocks, c, out, Op::MeanPool { input: a, seq_len }, ng))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}×{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let k = self.node(*a).cols;
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::gemm_nt(g, self.value(*b), rows, cols, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::gemm_tn(self.value(*a), g, rows, k, cols, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let k = self.node(*a).cols;
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::gemm_nn(g, self.value(*b), rows, cols, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::gemm_tn(g, self.value(*a), rows, cols, k, gb);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let gt = kernels::transpose(g, rows, cols);
                    add_into(ga, &gt);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(s, d)| *s -= *d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for ((s, d), y) in ga.iter_mut().zip(g).zip(bv) {
                        *s += *d * *y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for ((s, d), x) in gb.iter_mut().zip(g).zip(av) {
                        *s += *d * *x;
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, d)| *s -= *d);
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, d)| *s += *d * *f);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, d), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *s += *d * *y;
                    }
                }
            }
            Op::Log(a) => {
                let floor = T::log_floor();
                let xs = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, d), x) in ga.iter_mut().zip(g).zip(xs) {
                        if *x > floor {
                            *s += *d / *x;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, d), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *s += *d * (T::one() - *y * *y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let d = g[0] / T::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|s| *s += d);
                }
            }
            Op::MeanRows(a) => {
                let n = T::lit(self.node(*a).rows as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    for row in ga.chunks_exact_mut(cols) {
                        for (s, d) in row.iter_mut().zip(g) {
                            *s += *d / n;
                        }
                    }
                }
            }
            Op::SoftmaxRows { input, inv_temp } => {
                if let Some(ga) = self.slot(grads, *input) {
                    for ((gr, dr), yr) in ga
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(node.value.chunks_exact(cols))
                    {
                        let dot: T = dr.iter().zip(yr).map(|(d, y)| *d * *y).sum();
                        for ((s, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *s += *inv_temp * *y * (*d - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows { input, norms } => {
                if let Some(ga) = self.slot(grads, *input) {
                    for (((gr, dr), yr), n) in ga
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(node.value.chunks_exact(cols))
                        .zip(norms)
                    {
                        let dot: T = dr.iter().zip(yr).map(|(d, y)| *d * *y).sum();
                        for ((s, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *s += (*d - *y * dot) / *n;
                        }
                    }
                }
            }
            Op::GatherRows { input, index } => {
                if let Some(ga) = self.slot(grads, *input) {
                    for (j, &i) in index.iter().enumerate() {
                        add_into(&mut ga[i * cols..(i + 1) * cols], &g[j * cols..(j + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.node(*a).rows * cols;
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, &g[..split]);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, &g[split..]);
                }
            }
            Op::SeqAttention {
                q,
                k,
                v,
                seq_len,
                scale,
                probs,
            } => self.attention_backward(g, rows, cols, [*q, *k, *v], *seq_len, *scale, probs, grads),
            Op::PrefixAttention {
                q,
                k,
                v,
                prefix_k,
                prefix_v,
                prefix_len,
                shared,
                scale,
                probs,
            } => self.prefix_attention_backward(
                g,
                cols,
                [*q, *k, *v, *prefix_k, *prefix_v],
                *prefix_len,
                *shared,
                *scale,
                probs,
                grads,
            ),
            Op::MeanPool { input, seq_len } => {
                let inv = T::one() / T::lit(*seq_len as f64);
                if let Some(ga) = self.slot(grads, *input) {
                    for (i, row) in ga.chunks_exact_mut(cols).enumerate() {
                        let src = &g[(i / seq_len) * cols..(i / seq_len + 1) * cols];
                        for (s, d) in row.iter_mut().zip(src) {
                            *s += *d * inv;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        rows: usize,
        dim: usize,
        [q, k, v]: [Var; 3],
        l: usize,
        scale: T,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let blocks = rows / l;
        // dS for every block, computed once and shared by the q and k updates
        let mut ds = vec![T::zero(); blocks * l * l];
        let need_qk = self.node(q).needs_grad || self.node(k).needs_grad;
        for b in 0..blocks {
            let span = b * l * dim..(b + 1) * l * dim;
            let p = &probs[b * l * l..(b + 1) * l * l];
            if let Some(gv) = self.slot(grads, v) {
                kernels::gemm_tn(p, &g[span.clone()], l, l, dim, &mut gv[span.clone()]);
            }
            if need_qk {
                let mut dp = vec![T::zero(); l * l];
                kernels::gemm_nt(&g[span.clone()], &vv[span.clone()], l, dim, l, &mut dp);
                let dsb = &mut ds[b * l * l..(b + 1) * l * l];
                for ((dsr, dpr), pr) in dsb
                    .chunks_exact_mut(l)
                    .zip(dp.chunks_exact(l))
                    .zip(p.chunks_exact(l))
                {
                    let dot: T = dpr.iter().zip(pr).map(|(a, b)| *a * *b).sum();
                    for ((s, d), y) in dsr.iter_mut().zip(dpr).zip(pr) {
                        *s = *y * (*d - dot) * scale;
                    }
                }
            }
        }
        if !need_qk {
            return;
        }
        if let Some(gq) = self.slot(grads, q) {
            for b in 0..blocks {
                let span = b * l * dim..(b + 1) * l * dim;
                kernels::gemm_nn(&ds[b * l * l..(b + 1) * l * l], &kv[span.clone()], l, l, dim, &mut gq[span]);
            }
        }
        if let Some(gk) = self.slot(grads, k) {
            for b in 0..blocks {
                let span = b * l * dim..(b + 1) * l * dim;
                kernels::gemm_tn(&ds[b * l * l..(b + 1) * l * l], &qv[span.clone()], l, l, dim, &mut gk[span]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn prefix_attention_backward(
        &self,
        g: &[T],
        dim: usize,
        [q, k, v, pk, pv]: [Var; 5],
        l: usize,
        shared: bool,
        scale: T,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let w = l + 1;
        let n = g.len() / dim;
        let group = |i: usize| if shared { 0 } else { i };
        let prow = |base: usize, j: usize| (base * l + j) * dim..(base * l + j + 1) * dim;
        let own = |i: usize| i * dim..(i + 1) * dim;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (pkv, pvv) = (self.value(pk), self.value(pv));

        if let Some(gv) = self.slot(grads, v) {
            for i in 0..n {
                let p = probs[i * w + l];
                gv[own(i)].iter_mut().zip(&g[own(i)]).for_each(|(d, s)| *d += p * *s);
            }
        }
        if let Some(gpv) = self.slot(grads, pv) {
            for i in 0..n {
                for j in 0..l {
                    let p = probs[i * w + j];
                    gpv[prow(group(i), j)].iter_mut().zip(&g[own(i)]).for_each(|(d, s)| *d += p * *s);
                }
            }
        }
        if !(self.node(q).needs_grad || self.node(k).needs_grad || self.node(pk).needs_grad) {
            return;
        }
        // dS, already scaled
        let mut ds = vec![T::zero(); n * w];
        for i in 0..n {
            let gi = &g[own(i)];
            let p = &probs[i * w..(i + 1) * w];
            let dsr = &mut ds[i * w..(i + 1) * w];
            for (j, d) in dsr.iter_mut().enumerate() {
                let src = if j < l { &pvv[prow(group(i), j)] } else { &vv[own(i)] };
                *d = dot(gi, src);
            }
            let mix: T = dsr.iter().zip(p).map(|(a, b)| *a * *b).sum();
            for (d, pj) in dsr.iter_mut().zip(p) {
                *d = *pj * (*d - mix) * scale;
            }
        }
        if let Some(gq) = self.slot(grads, q) {
            for i in 0..n {
                let dst = &mut gq[own(i)];
                for j in 0..w {
                    let key = if j < l { &pkv[prow(group(i), j)] } else { &kv[own(i)] };
                    let s = ds[i * w + j];
                    dst.iter_mut().zip(key).for_each(|(d, x)| *d += s * *x);
                }
            }
        }
        if let Some(gk) = self.slot(grads, k) {
            for i in 0..n {
                let s = ds[i * w + l];
                gk[own(i)].iter_mut().zip(&qv[own(i)]).for_each(|(d, x)| *d += s * *x);
            }
        }
        if let Some(gpk) = self.slot(grads, pk) {
            for i in 0..n {
                for j in 0..l {
                    let s = ds[i * w + j];
                    gpk[prow(group(i), j)].iter_mut().zip(&qv[own(i)]).for_each(|(d, x)| *d += s * *x);
                }
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first touch; `None` when `v`
    /// needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let n = self.node(v);
        if !n.needs_grad {
            return None;
        }
        let len = n.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// `row ← softmax(scale · row)`, stabilized by the row maximum.
fn softmax_in_place<T: Scalar>(row: &mut [T], scale: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = ((*x - max) * scale).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}
