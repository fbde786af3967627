use std::sync::Arc;

use super::kernels::{self, dot};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which score entries a softmax row may use.
#[derive(Debug, Clone)]
pub enum Mask {
    None,
    /// Square scores; row `i` sees columns `0..=i`.
    Causal,
    /// Row-major, `true` = allowed.
    Explicit(Arc<Vec<bool>>),
}

impl Mask {
    fn allows(&self, cols: usize, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Explicit(m) => m[i * cols + j],
        }
    }
}

enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax {
        x: Var,
        scale: T,
    },
    RelationFactors {
        table: Var,
        ids: Arc<Vec<u8>>,
        head: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
        total: T,
        probs: Tensor<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only computation record. Parameters are read in place from the
/// borrowed store; gradients land in [`Gradients`].
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.tensor(id),
            _ => node.value.as_ref().expect("non-parameter nodes own a value"),
        }
    }

    fn push(&mut self, value: Option<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Some(t), Op::Constant, false)
    }

    /// A value whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Some(t), Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(None, Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul inner dimensions");
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(n, m);
        kernels::matmul_acc(av.data(), bv.data(), out.data_mut(), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(Some(out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_bt inner dimensions");
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(n, m);
        kernels::matmul_bt_acc(av.data(), bv.data(), out.data_mut(), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(Some(out), Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(Some(out), Op::Add(a, b), ng)
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols(), "add_row widths");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Some(out), Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(Some(out), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let ng = self.ng(a);
        self.push(Some(out), Op::Scale(a, s), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("shape");
        let ng = self.ng(a);
        self.push(Some(out), op, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain` and
    /// `bias` (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, d));
        assert_eq!(b.shape(), (1, d));
        let dt = T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Some(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id as usize));
        }
        let ng = self.ng(table);
        self.push(
            Some(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols());
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(Some(out), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Some(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row softmax of `scale * x` over the entries allowed by `mask`; masked
    /// entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, scale: T, mask: Mask) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        if matches!(mask, Mask::Causal) && n != m {
            return Err(Error::invalid("causal mask needs square scores"));
        }
        if let Mask::Explicit(mk) = &mask {
            if mk.len() != n * m {
                return Err(Error::invalid("mask shape does not match scores"));
            }
        }
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = xv.row(i);
            let mut max = T::neg_infinity();
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if mask.allows(m, i, j) {
                    any = true;
                    let s = v * scale;
                    if s > max {
                        max = s;
                    }
                }
            }
            if !any {
                return Err(Error::invalid(format!("softmax row {i} is fully masked")));
            }
            let orow = out.row_mut(i);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if mask.allows(m, i, j) {
                    let e = (v * scale - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Some(out), Op::Softmax { x, scale }, ng))
    }

    /// Multiplicative relation factors for one head: entry `(i, j)` with
    /// `j <= i` is `exp(table[ids(i, j), head])`, entries above the diagonal
    /// are 1. `ids` is the row-major lower triangle of an `n x n` matrix.
    pub fn relation_factors(&mut self, table: Var, ids: Arc<Vec<u8>>, n: usize, head: usize) -> Var {
        assert_eq!(ids.len(), n * (n + 1) / 2, "relation triangle size");
        let tv = self.value(table);
        let heads = tv.cols();
        assert!(head < heads);
        let mut out = Tensor::filled(n, n, T::one());
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                let class = ids[k] as usize;
                k += 1;
                out.set(i, j, tv.data()[class * heads + head].exp());
            }
        }
        let ng = self.ng(table);
        self.push(Some(out), Op::RelationFactors { table, ids, head }, ng)
    }

    /// Weighted mean of per-row negative log-likelihoods.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = lv.shape();
        if targets.len() != n || weights.len() != n {
            return Err(Error::invalid("targets/weights length does not match logits"));
        }
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::invalid("cross-entropy mask selects no positions"));
        }
        let mut probs = Tensor::zeros(n, v);
        let mut loss = T::zero();
        for i in 0..n {
            if weights[i] == T::zero() {
                continue;
            }
            let t = targets[i] as usize;
            if t >= v {
                return Err(Error::invalid(format!("target id {t} outside {v} classes")));
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let prow = probs.row_mut(i);
            let mut sum = T::zero();
            for (p, &x) in prow.iter_mut().zip(row) {
                let e = (x - max).exp();
                *p = e;
                sum += e;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            let lse = max + sum.ln();
            loss += weights[i] * (lse - row[t]);
        }
        let out = Tensor::scalar(loss / total);
        let ng = self.ng(logits);
        Ok(self.push(
            Some(out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Some(Tensor::scalar(s)), Op::Sum(a), ng)
    }

    /// Reverse pass from a `1 x 1` node. The graph is left intact so several
    /// roots may be differentiated in turn.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::invalid("backward root must be a scalar"));
        }
        if !rv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(dy) = hi[0].as_ref() else { continue };
            self.backprop_node(i, dy, lo);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<T>, g: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let ga = slot(g, *a, n, k);
                    kernels::matmul_bt_acc(dy.data(), bv.data(), ga.data_mut(), n, m, k);
                }
                if self.ng(*b) {
                    let gb = slot(g, *b, k, m);
                    kernels::matmul_at_acc(av.data(), dy.data(), gb.data_mut(), n, k, m);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.ng(*a) {
                    let ga = slot(g, *a, n, k);
                    kernels::matmul_acc(dy.data(), bv.data(), ga.data_mut(), n, m, k);
                }
                if self.ng(*b) {
                    let gb = slot(g, *b, m, k);
                    kernels::matmul_at_acc(dy.data(), av.data(), gb.data_mut(), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        slot(g, v, dy.rows(), dy.cols()).add_assign(dy);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    slot(g, *a, dy.rows(), dy.cols()).add_assign(dy);
                }
                if self.ng(*row) {
                    let gr = slot(g, *row, 1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, &d) in gr.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = slot(g, *a, dy.rows(), dy.cols());
                    for ((o, &d), &y) in ga.data_mut().iter_mut().zip(dy.data()).zip(bv.data()) {
                        *o += d * y;
                    }
                }
                if self.ng(*b) {
                    let gb = slot(g, *b, dy.rows(), dy.cols());
                    for ((o, &d), &x) in gb.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(g, *a, dy.rows(), dy.cols());
                for (o, &d) in ga.data_mut().iter_mut().zip(dy.data()) {
                    *o += d * *s;
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga = slot(g, *a, dy.rows(), dy.cols());
                for ((o, &d), &x) in ga.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                    *o += d * kernels::gelu_grad(x);
                }
            }
            Op::Sigmoid(a) | Op::Tanh(a) => {
                let y = node.value.as_ref().expect("value");
                let is_sig = matches!(node.op, Op::Sigmoid(_));
                let ga = slot(g, *a, dy.rows(), dy.cols());
                for ((o, &d), &yv) in ga.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                    let local = if is_sig {
                        yv * (T::one() - yv)
                    } else {
                        T::one() - yv * yv
                    };
                    *o += d * local;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, d) = xhat.shape();
                let gv = self.value(*gain);
                let dt = T::lit(d as f64);
                if self.ng(*x) {
                    let gx = slot(g, *x, n, d);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        let dyr = dy.row(r);
                        let xh = xhat.row(r);
                        for c in 0..d {
                            dxhat[c] = dyr[c] * gv.data()[c];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dt;
                        let mean_dx = dot(&dxhat, xh) / dt;
                        let out = gx.row_mut(r);
                        for c in 0..d {
                            out[c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
                if self.ng(*gain) {
                    let gg = slot(g, *gain, 1, d);
                    for r in 0..n {
                        for c in 0..d {
                            gg.data_mut()[c] += dy.at(r, c) * xhat.at(r, c);
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = slot(g, *bias, 1, d);
                    for r in 0..n {
                        for (o, &v) in gb.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = self.value(*table).shape();
                let gt = slot(g, *table, rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id as usize).iter_mut().zip(dy.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).shape();
                let gx = slot(g, *x, rows, cols);
                for r in 0..rows {
                    let dst = &mut gx.row_mut(r)[*start..*start + dy.cols()];
                    for (o, &v) in dst.iter_mut().zip(dy.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.ng(p) {
                        let gp = slot(g, p, rows, cols);
                        for r in 0..rows {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&dy.row(r)[off..off + cols]) {
                                *o += v;
                            }
                        }
                    }
                    off += cols;
                }
            }
            Op::Softmax { x, scale } => {
                let y = node.value.as_ref().expect("value");
                let (n, m) = y.shape();
                let gx = slot(g, *x, n, m);
                for r in 0..n {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let s = dot(yr, dr);
                    let out = gx.row_mut(r);
                    for c in 0..m {
                        out[c] += yr[c] * (dr[c] - s) * *scale;
                    }
                }
            }
            Op::RelationFactors { table, ids, head } => {
                let y = node.value.as_ref().expect("value");
                let (rows, heads) = self.value(*table).shape();
                let gt = slot(g, *table, rows, heads);
                let n = y.rows();
                let mut k = 0;
                for i in 0..n {
                    for j in 0..=i {
                        let class = ids[k] as usize;
                        k += 1;
                        gt.data_mut()[class * heads + head] += dy.at(i, j) * y.at(i, j);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                total,
                probs,
            } => {
                let (n, v) = probs.shape();
                let upstream = dy.to_scalar();
                let gl = slot(g, *logits, n, v);
                for r in 0..n {
                    if weights[r] == T::zero() {
                        continue;
                    }
                    let w = upstream * weights[r] / *total;
                    let out = gl.row_mut(r);
                    for (o, &p) in out.iter_mut().zip(probs.row(r)) {
                        *o += w * p;
                    }
                    out[targets[r] as usize] -= w;
                }
            }
            Op::Sum(a) => {
                let (rows, cols) = self.value(*a).shape();
                let d = dy.to_scalar();
                for o in slot(g, *a, rows, cols).data_mut() {
                    *o += d;
                }
            }
        }
    }
}

fn slot<T: Scalar>(g: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    g[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars[id.0].and_then(|v| self.get(v))
    }

    /// One tensor per parameter, zeros where no gradient flowed.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.param_vars[i]
                    .and_then(|v| self.grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.rows(), p.tensor.cols()))
            })
            .collect()
    }
}

/// Softmax of `scale * scores` under `mask` as a plain function.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, scale: T, mask: Mask) -> Result<Tensor<T>> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = g.constant(x.clone());
    let y = g.softmax_rows(v, scale, mask)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_basic_rows() {
        let x = Tensor::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        let y = softmax_rows(&x, 1.0, Mask::None).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = Tensor::from_rows(&[vec![3.0f64, 100.0]]).unwrap();
        let y = softmax_rows(&x, 1.0, Mask::Explicit(Arc::new(vec![true, false]))).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        let err = softmax_rows(&x, 1.0, Mask::Explicit(Arc::new(vec![false, false])));
        assert!(err.is_err());
    }

    #[test]
    fn softmax_extreme_magnitudes_stay_finite() {
        let x = Tensor::from_rows(&[vec![1e4f32, -1e4, 0.0], vec![-1e4, -1e4, -1e4]]).unwrap();
        let y = softmax_rows(&x, 1.0, Mask::None).unwrap();
        assert!(y.all_finite());
        assert!((y.row(1).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(3, 7));
        let l = g.cross_entropy(logits, &[0, 3, 6], &[1.0f64, 1.0, 1.0]).unwrap();
        assert!((g.value(l).to_scalar() - 7f64.ln()).abs() < 1e-12);

        let mut t = Tensor::zeros(1, 4);
        t.set(0, 2, 50.0f64);
        let logits = g.input(t);
        let l = g.cross_entropy(logits, &[2], &[1.0]).unwrap();
        assert!(g.value(l).to_scalar() < 1e-20);

        let logits = g.input(Tensor::zeros(2, 3));
        assert!(g.cross_entropy(logits, &[0, 1], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_masked_rows_get_zero_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let t = Tensor::from_rows(&[vec![0.1f64, 0.5, -0.3], vec![1.0, 2.0, 3.0]]).unwrap();
        let logits = g.input(t);
        let l = g.cross_entropy(logits, &[1, 2], &[1.0, 0.0]).unwrap();
        let grads = g.backward(l).unwrap();
        let gl = grads.get(logits).unwrap();
        assert!(gl.row(1).iter().all(|&v| v == 0.0));
        assert!(gl.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::filled(2, 4, 3.0f64));
        let gain = g.constant(Tensor::filled(1, 4, 1.0));
        let bias = g.constant(Tensor::zeros(1, 4));
        let y = g.layer_norm(x, gain, bias);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.input(Tensor::from_rows(&[vec![1.0f64, -1.0]]).unwrap());
        let gain = g.constant(Tensor::filled(1, 2, 1.0));
        let bias = g.constant(Tensor::zeros(1, 2));
        let y = g.layer_norm(x, gain, bias);
        let sigma = (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).at(0, 0) - 1.0 / sigma).abs() < 1e-12);
        assert!((g.value(y).at(0, 1) + 1.0 / sigma).abs() < 1e-12);
    }

    #[test]
    fn relation_factors_are_one_at_zero_logits() {
        let mut store = ParamStore::new();
        let id = store.add("rel", Tensor::<f64>::zeros(4, 2)).unwrap();
        let mut g = Graph::new(&store);
        let t = g.param(id);
        let r = g.relation_factors(t, Arc::new(vec![0, 1, 2, 3, 0, 1]), 3, 1);
        assert!(g.value(r).data().iter().all(|&v| v == 1.0));
    }
}
