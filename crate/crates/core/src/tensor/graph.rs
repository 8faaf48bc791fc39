use std::borrow::Cow;

use rand::Rng;

use super::kernels::{self, dot, gemm_acc, gemm_tn_acc, softmax_masked_row, transpose};
use super::Element;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    /// `a · bᵀ`
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    MaskRows { a: Var, keep: Vec<bool> },
    MaskedSoftmax { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Sum { a: Var },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
}

/// One tape entry: a dense row-major buffer plus its gradient slot.
#[derive(Debug)]
pub struct TensorNode<'p, T: Element> {
    shape: Vec<usize>,
    data: Cow<'p, [T]>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    param: Option<usize>,
    op: Op<T>,
}

impl<'p, T: Element> TensorNode<'p, T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn param(&self) -> Option<usize> {
        self.param
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r, c] => (*r, *c),
            other => (other[..other.len() - 1].iter().product(), other[other.len() - 1]),
        }
    }
}

/// Reverse-mode tape. Parameters are borrowed, not copied, for the lifetime
/// `'p`; everything else is owned by the tape.
///
/// The multiply counter is private to the graph. Independent graphs running
/// on separate threads are merged by summing [`Graph::macs`] at join.
#[derive(Debug, Default)]
pub struct Graph<'p, T: Element> {
    nodes: Vec<TensorNode<'p, T>>,
    counting: bool,
    macs: u64,
    consumed: bool,
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            counting: false,
            macs: 0,
            consumed: false,
        }
    }

    pub fn with_counter() -> Self {
        let mut g = Self::new();
        g.counting = true;
        g
    }

    pub fn arm_counter(&mut self, armed: bool) {
        self.counting = armed;
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TensorNode<'p, T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradients of every parameter leaf, as `(param id, grad)`.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    /// Soft-score buffer of an attention node: `heads × n × n`, row-major.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn count(&mut self, n: u64) {
        if self.counting {
            self.macs += n;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(TensorNode {
            shape,
            data: Cow::Owned(data),
            grad: None,
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
        if shape.iter().product::<usize>() != len {
            return Err(Error::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![len],
            });
        }
        Ok(())
    }

    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        Self::check_len("constant", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn input(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        Self::check_len("input", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    /// Borrowed trainable leaf tagged with its parameter id.
    pub fn param(&mut self, id: usize, data: &'p [T], shape: &[usize]) -> Result<Var> {
        Self::check_len("param", shape, data.len())?;
        self.nodes.push(TensorNode {
            shape: shape.to_vec(),
            data: Cow::Borrowed(data),
            grad: None,
            requires_grad: true,
            param: Some(id),
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.0].dims2();
        let (k2, n) = self.nodes[b.0].dims2();
        if k != k2 || self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.count((m * k * n) as u64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.0].dims2();
        let (n, k2) = self.nodes[b.0].dims2();
        if k != k2 || self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let bt = transpose(self.value(b), n, k);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a), &bt, &mut out, m, k, n);
        self.count((m * k * n) as u64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Add { a, b }, rg))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.nodes[a.0].dims2();
        if self.nodes[bias.0].data.len() != cols {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(cols) {
            for (x, &b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::AddRow { a, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Scale { a, s }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Gelu { a }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].dims2();
        if self.nodes[gamma.0].data.len() != cols || self.nodes[beta.0].data.len() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let eps = T::of(eps);
        let inv_n = T::one() / T::of(cols as f64);
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            let rs = T::one() / (var * inv_n + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.nodes[table.0].dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "embedding",
                lhs: self.nodes[table.0].shape.clone(),
                rhs: vec![bad],
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        let op = Op::Embedding { table, ids: ids.to_vec() };
        Ok(self.push(vec![ids.len(), cols], out, op, rg))
    }

    /// Keeps the listed rows of `a`, in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.nodes[a.0].dims2();
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![rows.len()],
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&av[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        let op = Op::GatherRows { a, rows: rows.to_vec() };
        Ok(self.push(vec![rows.len(), cols], out, op, rg))
    }

    /// Stacks the rows of `b` under the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.nodes[a.0].dims2();
        let (nb, cb) = self.nodes[b.0].dims2();
        if ca != cb {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = Vec::with_capacity((na + nb) * ca);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![na + nb, ca], out, Op::ConcatRows { a, b }, rg))
    }

    /// Zeroes every row `r` with `!keep[r]`.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (n, cols) = self.nodes[a.0].dims2();
        if keep.len() != n {
            return Err(Error::Shape {
                op: "mask_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        let mut out = self.value(a).to_vec();
        for (row, &k) in out.chunks_exact_mut(cols).zip(keep) {
            if !k {
                row.fill(T::zero());
            }
        }
        let rg = self.rg(&[a]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::MaskRows { a, keep: keep.to_vec() }, rg))
    }

    /// Row-wise `softmax(logits + mask)`. `mask` entries are zero or
    /// [`Element::mask_value`]; a row with every entry masked is an error.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[T]) -> Result<Var> {
        let (rows, cols) = self.nodes[logits.0].dims2();
        if mask.len() != rows * cols {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = self.value(logits).to_vec();
        for (r, (row, m)) in out
            .chunks_exact_mut(cols)
            .zip(mask.chunks_exact(cols))
            .enumerate()
        {
            if !softmax_masked_row(row, Some(m)) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let rg = self.rg(&[logits]);
        let shape = self.nodes[logits.0].shape.clone();
        Ok(self.push(shape, out, Op::MaskedSoftmax { a: logits }, rg))
    }

    /// Mean negative log-likelihood of `targets` (one per row).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.nodes[logits.0].dims2();
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) || rows == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logits);
        let mut nll = T::zero();
        for (row, &t) in lv.chunks_exact(cols).zip(targets) {
            nll += log_sum_exp(row) - row[t];
        }
        let mut probs = lv.to_vec();
        for row in probs.chunks_exact_mut(cols) {
            kernels::softmax_row(row);
        }
        let out = vec![nll / T::of(rows as f64)];
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(vec![], out, op, rg))
    }

    /// Inverted dropout. Identity in eval mode or with `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if mode == Mode::Eval || p <= 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[a.0].data.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let rg = self.rg(&[a]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::Dropout { a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![], vec![s], Op::Sum { a }, rg))
    }

    /// Fused causal multi-head attention over a packed `[n × 3·d]` query/key/value
    /// matrix. Row order is sequence order, so key `j` is visible to query `i`
    /// iff `j <= i`; `key_visible` additionally masks keys (a query always sees
    /// itself). Logits are scaled by `1/√d_head`. Only causally visible entries
    /// are computed and counted.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        heads: usize,
        key_visible: Option<&[bool]>,
    ) -> Result<Var> {
        let (n, w) = self.nodes[qkv.0].dims2();
        if heads == 0 || w % (3 * heads) != 0 || key_visible.is_some_and(|k| k.len() != n) {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: self.nodes[qkv.0].shape.clone(),
                rhs: vec![heads],
            });
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let neg = T::mask_value();
        let x = self.value(qkv);
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        let mut mask_row = vec![T::zero(); n];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..n {
                let q = &x[i * w + qo..i * w + qo + dh];
                let p = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(q, &x[j * w + ko..j * w + ko + dh]) * scale;
                }
                let mask = key_visible.map(|vis| {
                    for j in 0..=i {
                        mask_row[j] = if vis[j] || j == i { T::zero() } else { neg };
                    }
                    &mask_row[..=i]
                });
                softmax_masked_row(p, mask);
                let o = &mut out[i * d + h * dh..i * d + h * dh + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let v = &x[j * w + vo..j * w + vo + dh];
                    for (oc, &vc) in o.iter_mut().zip(v) {
                        *oc += pj * vc;
                    }
                }
            }
        }
        self.count((n * (n + 1) * d) as u64);
        let rg = self.rg(&[qkv]);
        Ok(self.push(vec![n, d], out, Op::Attention { qkv, heads, probs }, rg))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively into
    /// every reachable node that requires them. The tape can be swept once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.accumulate(root, vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (x, d) in g.iter_mut().zip(delta) {
                    *x += d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn backward_op(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a.0].dims2();
                let (_, n) = self.nodes[b.0].dims2();
                if self.wants(a) {
                    let bt = transpose(self.value(b), k, n);
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(g, &bt, &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(self.value(a), g, &mut db, m, k, n);
                    self.accumulate(b, db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.nodes[a.0].dims2();
                let (n, _) = self.nodes[b.0].dims2();
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(g, self.value(b), &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    // db[n×k] = gᵀ[n×m] · a[m×k]
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn_acc(g, self.value(a), &mut db, m, n, k);
                    self.accumulate(b, db);
                }
            }
            Op::Add { a, b } => {
                if self.wants(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(b, g.to_vec());
                }
            }
            Op::AddRow { a, bias } => {
                if self.wants(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.wants(bias) {
                    let cols = self.nodes[bias.0].data.len();
                    let mut db = vec![T::zero(); cols];
                    for row in g.chunks_exact(cols) {
                        for (x, &v) in db.iter_mut().zip(row) {
                            *x += v;
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    let d = g.iter().zip(self.value(b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(a, d);
                }
                if self.wants(b) {
                    let d = g.iter().zip(self.value(a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(b, d);
                }
            }
            Op::Scale { a, s } => {
                if self.wants(a) {
                    self.accumulate(a, g.iter().map(|&v| v * s).collect());
                }
            }
            Op::Gelu { a } => {
                if self.wants(a) {
                    let d = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&g, &x)| g * gelu_grad(x))
                        .collect();
                    self.accumulate(a, d);
                }
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref rstd } => {
                let (rows, cols) = self.nodes[x.0].dims2();
                if self.wants(x) {
                    let gv = self.value(gamma);
                    let inv_n = T::one() / T::of(cols as f64);
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            mean_d += dxh;
                            mean_dh += dxh * hr[c];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            dx[r * cols + c] = rstd[r] * (dxh - mean_d - hr[c] * mean_dh);
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.wants(gamma) {
                    let mut dg = vec![T::zero(); cols];
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    self.accumulate(gamma, dg);
                }
                if self.wants(beta) {
                    let mut db = vec![T::zero(); cols];
                    for gr in g.chunks_exact(cols) {
                        for c in 0..cols {
                            db[c] += gr[c];
                        }
                    }
                    self.accumulate(beta, db);
                }
            }
            Op::Embedding { table, ref ids } => {
                if self.wants(table) {
                    let (rows, cols) = self.nodes[table.0].dims2();
                    let mut dt = vec![T::zero(); rows * cols];
                    for (gr, &i) in g.chunks_exact(cols).zip(ids) {
                        for (x, &v) in dt[i * cols..(i + 1) * cols].iter_mut().zip(gr) {
                            *x += v;
                        }
                    }
                    self.accumulate(table, dt);
                }
            }
            Op::GatherRows { a, ref rows } => {
                if self.wants(a) {
                    let (n, cols) = self.nodes[a.0].dims2();
                    let mut da = vec![T::zero(); n * cols];
                    for (gr, &r) in g.chunks_exact(cols).zip(rows) {
                        for (x, &v) in da[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                            *x += v;
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            Op::ConcatRows { a, b } => {
                let split = self.nodes[a.0].data.len();
                if self.wants(a) {
                    self.accumulate(a, g[..split].to_vec());
                }
                if self.wants(b) {
                    self.accumulate(b, g[split..].to_vec());
                }
            }
            Op::MaskRows { a, ref keep } => {
                if self.wants(a) {
                    let cols = g.len() / keep.len().max(1);
                    let mut da = g.to_vec();
                    for (row, &k) in da.chunks_exact_mut(cols.max(1)).zip(keep) {
                        if !k {
                            row.fill(T::zero());
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            Op::MaskedSoftmax { a } => {
                if self.wants(a) {
                    let (_, cols) = self.nodes[a.0].dims2();
                    let y = &self.nodes[idx].data;
                    let mut da = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in da
                        .chunks_exact_mut(cols)
                        .zip(y.chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            dr[c] = yr[c] * (gr[c] - s);
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            Op::CrossEntropy { logits, ref targets, ref probs } => {
                if self.wants(logits) {
                    let (rows, cols) = self.nodes[logits.0].dims2();
                    let s = g[0] / T::of(rows as f64);
                    let mut d = probs.clone();
                    for (row, &t) in d.chunks_exact_mut(cols).zip(targets) {
                        row[t] -= T::one();
                        for x in row.iter_mut() {
                            *x *= s;
                        }
                    }
                    self.accumulate(logits, d);
                }
            }
            Op::Dropout { a, ref mask } => {
                if self.wants(a) {
                    self.accumulate(a, g.iter().zip(mask).map(|(&g, &m)| g * m).collect());
                }
            }
            Op::Sum { a } => {
                if self.wants(a) {
                    let n = self.nodes[a.0].data.len();
                    self.accumulate(a, vec![g[0]; n]);
                }
            }
            Op::Attention { qkv, heads, ref probs } => {
                if self.wants(qkv) {
                    let dqkv = attention_backward(self.value(qkv), probs, g, heads, self.nodes[idx].dims2());
                    self.accumulate(qkv, dqkv);
                }
            }
        }
    }
}

fn attention_backward<T: Element>(
    x: &[T],
    probs: &[T],
    g: &[T],
    heads: usize,
    (n, d): (usize, usize),
) -> Vec<T> {
    let w = 3 * d;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dx = vec![T::zero(); n * w];
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..n {
            let p = &probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            let gi = &g[i * d + h * dh..i * d + h * dh + dh];
            // dP_ij = g_i · v_j ; dV_j += p_ij g_i
            let mut s = T::zero();
            for j in 0..=i {
                let v = &x[j * w + vo..j * w + vo + dh];
                dp[j] = dot(gi, v);
                s += p[j] * dp[j];
                let dv = &mut dx[j * w + vo..j * w + vo + dh];
                for (a, &b) in dv.iter_mut().zip(gi) {
                    *a += p[j] * b;
                }
            }
            // dS_ij = p_ij (dP_ij - Σ_k p_ik dP_ik), scaled into q and k
            for j in 0..=i {
                let ds = p[j] * (dp[j] - s) * scale;
                if ds == T::zero() {
                    continue;
                }
                for c in 0..dh {
                    let qv = x[i * w + qo + c];
                    let kv = x[j * w + ko + c];
                    dx[i * w + qo + c] += ds * kv;
                    dx[j * w + ko + c] += ds * qv;
                }
            }
        }
    }
    dx
}

pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu_fwd<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
