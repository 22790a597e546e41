use std::sync::Arc;

use rand::{Rng, RngCore};

use super::attention::{self, AttentionSegment};
use super::kernels::{self, dot};
use super::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

enum Op<T: Scalar> {
    Leaf { param: Option<ParamId> },
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    Relu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<AttentionSegment>,
        heads: usize,
        probs: Vec<T>,
        drop_mask: Option<Vec<T>>,
    },
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, which is already a topological
/// order, so the reverse pass is a single backwards sweep.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    generation: u64,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
            grad_enabled: true,
        }
    }

    /// A tape whose parameters are bound as constants.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(TensorError::TapeClosed);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn node(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(self.node(self.idx(v)?))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf { param: None }, rg)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Binds a stored parameter as a leaf without copying its buffer.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value: store.value_arc(id),
            op: Op::Leaf { param: Some(id) },
            requires_grad: rg,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        let t = self.node(i);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(ai, "matmul")?;
        let (k2, n) = self.dims2(bi, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.node(ai), self.node(bi)));
        }
        let out = kernels::matmul(self.node(ai).data(), self.node(bi).data(), m, k, n);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ai, bi), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(ai, "matmul_nt")?;
        let (n, k2) = self.dims2(bi, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.node(ai), self.node(bi)));
        }
        let out = kernels::matmul_nt(self.node(ai).data(), self.node(bi).data(), m, k, n);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(ai, bi), rg))
    }

    fn same_shape(&self, ai: usize, bi: usize, op: &'static str) -> Result<()> {
        if self.node(ai).shape() != self.node(bi).shape() {
            return Err(mismatch(op, self.node(ai), self.node(bi)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "add")?;
        let out = zip_map(self.node(ai), self.node(bi), |x, y| x + y);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Add(ai, bi), rg))
    }

    /// Adds a length-`n` vector to every row of `x[.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let n = self.node(xi).cols();
        if self.node(bi).len() != n {
            return Err(mismatch("add_row", self.node(xi), self.node(bi)));
        }
        let b = self.node(bi).data();
        let mut out = self.node(xi).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let shape = self.node(xi).shape().to_vec();
        let rg = self.rg(xi) || self.rg(bi);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(xi, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "mul")?;
        let out = zip_map(self.node(ai), self.node(bi), |x, y| x * y);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Mul(ai, bi), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let f = T::from_f64_lossy(factor);
        let out = map(self.node(xi), |v| v * f);
        let rg = self.rg(xi);
        Ok(self.push(out, Op::Scale(xi, f), rg))
    }

    /// Adds a constant tensor (e.g. an attention mask bias); no gradient flows
    /// into the constant.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        if self.node(xi).shape() != c.shape() {
            return Err(mismatch("add_const", self.node(xi), c));
        }
        let out = zip_map(self.node(xi), c, |a, b| a + b);
        let rg = self.rg(xi);
        Ok(self.push(out, Op::AddConst(xi), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = map(self.node(xi), |v| v.max(T::zero()));
        let rg = self.rg(xi);
        Ok(self.push(out, Op::Relu(xi), rg))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.node(xi);
        let out = kernels::softmax_rows(t.data(), t.cols());
        let shape = t.shape().to_vec();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(xi), rg))
    }

    /// Row-wise `(x − mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let d = self.node(xi).cols();
        if self.node(gi).len() != d || self.node(bi).len() != d {
            return Err(mismatch("layer_norm", self.node(xi), self.node(gi)));
        }
        let eps = T::from_f64_lossy(eps);
        let (g, b) = (self.node(gi).data(), self.node(bi).data());
        let src = self.node(xi);
        let rows = src.rows();
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(d) {
            let (mean, r) = kernels::row_moments(row, eps);
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = src.shape().to_vec();
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of `table[V, d]`, producing `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.idx(table)?;
        let (v, d) = self.dims2(ti, "gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, len: v });
            }
            out.extend_from_slice(self.node(ti).row(id));
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0, d],
                len: 0,
            });
        }
        let rg = self.rg(ti);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table: ti,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: kept elements are scaled by `1 / (1 − rate)`.
    /// A zero rate returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        let xi = self.idx(x)?;
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.node(xi).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.node(xi);
        let out: Vec<T> = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = src.shape().to_vec();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x: xi, mask }, rg))
    }

    /// Mean over non-pad rows of `−log softmax(logits)[t, target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let li = self.idx(logits)?;
        let (rows, classes) = self.dims2(li, "cross_entropy")?;
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![rows, classes],
                right: vec![targets.len()],
            });
        }
        let mut kept = Vec::with_capacity(rows);
        for &t in targets {
            if t == pad_id {
                kept.push(None);
            } else if t >= classes {
                return Err(TensorError::TargetOutOfRange { target: t, classes });
            } else {
                kept.push(Some(t));
            }
        }
        let count = kept.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::EmptyTarget);
        }
        let data = self.node(li).data();
        let mut total = T::zero();
        for (r, t) in kept.iter().enumerate() {
            if let Some(t) = t {
                let row = &data[r * classes..(r + 1) * classes];
                total = total + kernels::log_sum_exp(row) - row[*t];
            }
        }
        let probs = kernels::softmax_rows(data, classes);
        let loss = total / T::from_usize(count).unwrap_or_else(T::one);
        let rg = self.rg(li);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                targets: kept,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s: T = self.node(xi).data().iter().copied().sum();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (r, c) = self.dims2(xi, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let src = self.node(xi).data();
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(xi);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { x: xi, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(TensorError::InvalidShape { shape: vec![], len: 0 });
        };
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (ri, ci) = self.dims2(i, "concat_cols")?;
            if ri != r {
                return Err(mismatch("concat_cols", self.node(first), self.node(i)));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for &i in &idx {
                out.extend_from_slice(self.node(i).row(row));
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols(idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(TensorError::InvalidShape { shape: vec![], len: 0 });
        };
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let (ri, ci) = self.dims2(i, "concat_rows")?;
            if ci != c {
                return Err(mismatch("concat_rows", self.node(first), self.node(i)));
            }
            rows += ri;
            out.extend_from_slice(self.node(i).data());
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_parts(vec![rows, c], out), Op::ConcatRows(idx), rg))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[rows_q, d]`, `k` and `v` are `[rows_k, d]`; head `h` uses
    /// columns `h·d/heads..(h+1)·d/heads`. Masked logits get
    /// [`MASKED_LOGIT`](super::MASKED_LOGIT) added before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[AttentionSegment],
        heads: usize,
    ) -> Result<Var> {
        self.attention_impl(q, k, v, segments, heads, None)
    }

    /// [`Tape::attention`] with inverted dropout on the attention weights.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_dropout(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[AttentionSegment],
        heads: usize,
        rate: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        self.attention_impl(q, k, v, segments, heads, Some((rate, rng)))
    }

    fn attention_impl(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[AttentionSegment],
        heads: usize,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (qt, kt, vt) = (self.node(qi), self.node(ki), self.node(vi));
        let drop_mask = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let n: usize = segments
                    .iter()
                    .map(|s| heads * s.queries.len() * s.keys.len())
                    .sum();
                let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
                Some(
                    (0..n)
                        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
                        .collect::<Vec<T>>(),
                )
            }
            _ => None,
        };
        let fwd = attention::forward(qt, kt, vt, segments, heads, drop_mask.as_deref())?;
        let shape = vec![qt.rows(), qt.cols()];
        let rg = self.rg(qi) || self.rg(ki) || self.rg(vi);
        Ok(self.push(
            Tensor::from_parts(shape, fwd.out),
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                segments: segments.to_vec(),
                heads,
                probs: fwd.probs,
                drop_mask,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of nodes used more than
    /// once are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.node(li).len() != 1 {
            return Err(TensorError::NotScalar(self.node(li).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; li + 1];
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(li + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } if grads[i].is_some() => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
            generation: self.generation,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.node(i);
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.node(*a));
                let n = self.node(*b).cols();
                if self.rg(*a) {
                    let da = kernels::matmul_nt(g, self.node(*b).data(), m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = kernels::matmul_tn(self.node(*a).data(), g, k, m, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(self.node(*a));
                let n = self.node(*b).rows();
                if self.rg(*a) {
                    let da = kernels::matmul(g, self.node(*b).data(), m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = kernels::matmul_tn(g, self.node(*a).data(), n, m, k);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.rg(*b) {
                    let n = out.cols();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g.iter().zip(self.node(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = g.iter().zip(self.node(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, g.iter().map(|&v| v * *f).collect());
            }
            Op::AddConst(x) => accumulate(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.node(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (yr, gr) in out.data().chunks(c).zip(g.chunks(c)) {
                    let s = dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(&y, &gv)| y * (gv - s)));
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gam = self.node(*gamma).data();
                if self.rg(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + hr[j] * gr[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.rg(*beta) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        for (b, &v) in db.iter_mut().zip(gr) {
                            *b = *b + v;
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if self.rg(*x) {
                    let nd = T::from_usize(d).unwrap_or_else(T::one);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((hr, gr), &r) in xhat.chunks(d).zip(g.chunks(d)).zip(rstd) {
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / nd;
                        let mean_dh_h = dot(&dh, hr) / nd;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&a, &h)| r * (a - mean_dh - h * mean_dh_h)),
                        );
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.node(*table);
                let d = t.cols();
                let mut dt = vec![T::zero(); t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = self.node(*logits).cols();
                let scale = g[0] / T::from_usize(*count).unwrap_or_else(T::one);
                let mut dl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..c {
                            dl[r * c + j] = probs[r * c + j] * scale;
                        }
                        dl[r * c + t] = dl[r * c + t] - scale;
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let n = self.node(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SliceCols { x, start } => {
                let src = self.node(*x);
                let c = src.cols();
                let w = out.cols();
                let mut dx = vec![T::zero(); src.len()];
                for (r, gr) in g.chunks(w).enumerate() {
                    dx[r * c + start..r * c + start + w].copy_from_slice(gr);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.node(p).cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(self.node(p).len());
                        for gr in g.chunks(total) {
                            dp.extend_from_slice(&gr[offset..offset + w]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
                drop_mask,
            } => {
                let b = attention::backward(
                    self.node(*q),
                    self.node(*k),
                    self.node(*v),
                    segments,
                    *heads,
                    probs,
                    drop_mask.as_deref(),
                    g,
                );
                for (i, d) in [(*q, b.dq), (*k, b.dk), (*v, b.dv)] {
                    if self.rg(i) {
                        accumulate(grads, i, d);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.node(p).len();
                    if self.rg(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
    generation: u64,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed to it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.generation != self.generation {
            return None;
        }
        self.by_node.get(v.index)?.as_deref()
    }

    /// Gradients of bound parameters. A parameter bound more than once
    /// appears once per binding.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.by_node[i].as_deref().map(|g| (id, g)))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, g: Vec<T>) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}
