//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed operation in execution order, so the
//! tape is topologically sorted by construction. [`Graph::backward`] walks
//! it once in reverse. Graphs are built per truncated-BPTT window and then
//! dropped; recurrent state crosses window boundaries only as plain values
//! re-entered through [`Graph::constant`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `Σ x_i W_iᵀ + b`
    Affine {
        terms: Vec<(usize, usize)>,
        bias: Option<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Scale(usize, T),
    MulConst(usize, Vec<T>),
    AddConst(usize),
    /// `x + b` with `b` broadcast over rows
    AddRow(usize, usize),
    /// `mask ⊙ prev + (1 − mask) ⊙ new`
    Blend {
        prev: usize,
        new: usize,
        mask: Vec<T>,
    },
    Columns {
        input: usize,
        start: usize,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(usize),
    SumScalars(Vec<usize>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::AddConst(_) => "add_const",
            Op::AddRow(..) => "add_row",
            Op::Blend { .. } => "blend",
            Op::Columns { .. } => "columns",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Sum(_) => "sum",
            Op::SumScalars(_) => "sum_scalars",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { terms, bias } => terms
                .iter()
                .flat_map(|&(w, x)| [w, x])
                .chain(*bias)
                .collect(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::AddConst(a)
            | Op::Sum(a) => vec![*a],
            Op::Blend { prev, new, .. } => vec![*prev, *new],
            Op::Columns { input, .. } => vec![*input],
            Op::LayerNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::SumScalars(items) => items.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    retain_all: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            retain_all: true,
        }
    }

    /// When disabled, `backward` only stores gradients on leaves. Training
    /// turns this off; probes that read intermediate gradients leave it on.
    pub fn retain_all_grads(&mut self, retain: bool) {
        self.retain_all = retain;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::Graph("tensor was not produced by this graph".into()));
        }
        if v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} no longer exists (graph has {})",
                v.index,
                self.nodes.len()
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => op.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.index].requires_grad = true;
        v
    }

    /// A non-differentiable input; gradients never flow into it.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("valid var")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    /// Overwrites the data of a leaf in place (same shape).
    pub fn set_leaf_data(&mut self, v: Var, data: &[T]) -> Result<()> {
        let i = self.check(v)?;
        let node = &mut self.nodes[i];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Graph("set_leaf_data on a non-leaf node".into()));
        }
        if node.value.len() != data.len() {
            return Err(Error::shape("set_leaf_data", node.value.shape(), &[data.len()]));
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.check(v).ok().and_then(|i| self.nodes[i].value.grad())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[self.check(v).expect("valid var")].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        let i = self.check(v).expect("valid var");
        self.nodes[i]
            .op
            .inputs()
            .into_iter()
            .map(|index| Var {
                graph: self.id,
                index,
            })
            .collect()
    }

    /// Every recorded operation that reads `v`.
    pub fn consumers(&self, v: Var) -> Vec<Var> {
        let i = self.check(v).expect("valid var");
        (i + 1..self.nodes.len())
            .filter(|&j| self.nodes[j].op.inputs().contains(&i))
            .map(|index| Var {
                graph: self.id,
                index,
            })
            .collect()
    }

    // ---------------------------------------------------------------- ops

    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        self.affine_sum(&[(w, x)], b)
    }

    /// `Σ x_i W_iᵀ + b` with `W_i: m×n_i`, `x_i: B×n_i` (or a single vector
    /// of length `n_i`), `b: m`, broadcast over the batch rows.
    pub fn affine_sum(&mut self, terms: &[(Var, Var)], b: Option<Var>) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::Empty("affine"));
        }
        let mut idx = Vec::with_capacity(terms.len());
        let mut batch = None;
        let mut out_dim = None;
        let mut vector_input = false;
        for &(w, x) in terms {
            let (wi, xi) = (self.check(w)?, self.check(x)?);
            let ws = self.nodes[wi].value.shape();
            let xs = self.nodes[xi].value.shape();
            if ws.len() != 2 || xs.is_empty() || xs.len() > 2 {
                return Err(Error::shape("affine", ws, xs));
            }
            let (rows, n) = self.nodes[xi].value.rows_cols();
            if n != ws[1] {
                return Err(Error::shape("affine", ws, xs));
            }
            vector_input = xs.len() == 1;
            if *batch.get_or_insert(rows) != rows || *out_dim.get_or_insert(ws[0]) != ws[0] {
                return Err(Error::shape("affine", ws, xs));
            }
            idx.push((wi, xi));
        }
        let (rows, m) = (batch.unwrap(), out_dim.unwrap());
        let bias = match b {
            Some(b) => {
                let bi = self.check(b)?;
                if self.nodes[bi].value.len() != m {
                    return Err(Error::shape("affine bias", &[m], self.nodes[bi].value.shape()));
                }
                Some(bi)
            }
            None => None,
        };
        let mut out = match bias {
            Some(bi) => {
                let bv = self.nodes[bi].value.data();
                let mut o = Vec::with_capacity(rows * m);
                for _ in 0..rows {
                    o.extend_from_slice(bv);
                }
                o
            }
            None => vec![T::zero(); rows * m],
        };
        for &(wi, xi) in &idx {
            let w = &self.nodes[wi].value;
            let x = &self.nodes[xi].value;
            let n = w.shape()[1];
            T::gemm(rows, n, m, T::one(), x.data(), false, w.data(), true, T::one(), &mut out);
        }
        let shape = if vector_input && terms.len() == 1 {
            vec![m]
        } else {
            vec![rows, m]
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Affine {
                terms: idx,
                bias,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((ai, bi))
    }

    fn zip_map(&self, ai: usize, bi: usize, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let a = &self.nodes[ai].value;
        let b = &self.nodes[bi].value;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data).expect("shape preserved")
    }

    fn map(&self, ai: usize, f: impl Fn(T) -> T) -> Tensor<T> {
        let a = &self.nodes[ai].value;
        Tensor::new(a.shape(), a.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("add", a, b)?;
        let v = self.zip_map(ai, bi, |x, y| x + y);
        Ok(self.push(v, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("sub", a, b)?;
        let v = self.zip_map(ai, bi, |x, y| x - y);
        Ok(self.push(v, Op::Sub(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("mul", a, b)?;
        let v = self.zip_map(ai, bi, |x, y| x * y);
        Ok(self.push(v, Op::Mul(ai, bi)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = self.map(ai, sigmoid);
        Ok(self.push(v, Op::Sigmoid(ai)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = self.map(ai, |x| x.tanh());
        Ok(self.push(v, Op::Tanh(ai)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let ai = self.check(a)?;
        let v = self.map(ai, |x| x * factor);
        Ok(self.push(v, Op::Scale(ai, factor)))
    }

    /// Elementwise product with a non-differentiable tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        if av.shape() != c.shape() {
            return Err(Error::shape("mul_const", av.shape(), c.shape()));
        }
        let data = av.data().iter().zip(c.data()).map(|(&x, &m)| x * m).collect();
        let v = Tensor::new(av.shape(), data)?;
        Ok(self.push(v, Op::MulConst(ai, c.data().to_vec())))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        if av.shape() != c.shape() {
            return Err(Error::shape("add_const", av.shape(), c.shape()));
        }
        let data = av.data().iter().zip(c.data()).map(|(&x, &m)| x + m).collect();
        let v = Tensor::new(av.shape(), data)?;
        Ok(self.push(v, Op::AddConst(ai)))
    }

    /// Adds the vector `b` (length `n`) to every row of the `B×n` tensor `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(b)?);
        let xv = &self.nodes[xi].value;
        let bv = &self.nodes[bi].value;
        let (rows, n) = xv.rows_cols();
        if bv.len() != n {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for r in 0..rows {
            add_into(&mut data[r * n..(r + 1) * n], bv.data());
        }
        let v = Tensor::new(xv.shape(), data)?;
        Ok(self.push(v, Op::AddRow(xi, bi)))
    }

    /// `mask ⊙ prev + (1 − mask) ⊙ new`; the mask is not differentiated.
    pub fn blend(&mut self, prev: Var, new: Var, mask: &Tensor<T>) -> Result<Var> {
        let (pi, ni) = self.same_shape("blend", prev, new)?;
        let shape = self.nodes[pi].value.shape();
        if shape != mask.shape() {
            return Err(Error::shape("blend mask", shape, mask.shape()));
        }
        let p = self.nodes[pi].value.data();
        let n = self.nodes[ni].value.data();
        let data = mask
            .data()
            .iter()
            .zip(p.iter().zip(n))
            .map(|(&m, (&p, &n))| m * p + (T::one() - m) * n)
            .collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Blend {
                prev: pi,
                new: ni,
                mask: mask.data().to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of a `B×N` tensor.
    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let (rows, cols) = av.rows_cols();
        if len == 0 || start + len > cols {
            return Err(Error::shape("columns", av.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let shape = if av.shape().len() == 1 {
            vec![len]
        } else {
            vec![rows, len]
        };
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Columns { input: ai, start }))
    }

    /// Per-row layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let xv = &self.nodes[xi].value;
        let (rows, n) = xv.rows_cols();
        if n == 0 {
            return Err(Error::Empty("layer_norm"));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        if gv.len() != n || bv.len() != n {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let mut normalized = Vec::with_capacity(rows * n);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let z = (v - mean) * is;
                normalized.push(z);
                out.push(gv.data()[j] * z + bv.data()[j]);
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                input: xi,
                gain: gi,
                bias: bi,
                normalized,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` (`V×e`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let tv = &self.nodes[ti].value;
        let (v, e) = tv.rows_cols();
        if ids.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(&[ids.len(), e], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy (natural log) of `targets` under softmax(`logits`)
    /// over the batch rows. Returns the scalar loss and the probabilities.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Tensor<T>)> {
        let li = self.check(logits)?;
        let lv = &self.nodes[li].value;
        let (rows, classes) = lv.rows_cols();
        if targets.len() != rows {
            return Err(Error::shape("softmax_xent", lv.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    bound: classes,
                });
            }
            let row = lv.row(r);
            let (lse, max) = log_sum_exp(row);
            loss += lse - (row[t] - max);
            probs.extend(row.iter().map(|&z| (z - max - lse).exp()));
        }
        loss = loss / T::of(rows as f64);
        let probs = Tensor::new(lv.shape(), probs)?;
        let v = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: li,
                targets: targets.to_vec(),
                probs: probs.data().to_vec(),
            },
        );
        Ok((v, probs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ai)))
    }

    pub fn sum_scalars(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Empty("sum_scalars"));
        }
        let mut idx = Vec::with_capacity(items.len());
        let mut s = T::zero();
        for &v in items {
            let i = self.check(v)?;
            let t = &self.nodes[i].value;
            if t.len() != 1 {
                return Err(Error::shape("sum_scalars", t.shape(), &[1]));
            }
            s += t.data()[0];
            idx.push(i);
        }
        Ok(self.push(Tensor::scalar(s), Op::SumScalars(idx)))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `∂seed/∂x` into the gradient slot of every leaf (and,
    /// unless disabled, every intermediate) reachable from `seed`. A scalar
    /// seed gets an implicit upstream gradient of one; otherwise pass
    /// `seed_grad` with the seed's shape.
    pub fn backward(&mut self, seed: Var, seed_grad: Option<&Tensor<T>>) -> Result<()> {
        let si = self.check(seed)?;
        let seed_value = &self.nodes[si].value;
        let initial = match seed_grad {
            Some(g) => {
                if g.shape() != seed_value.shape() {
                    return Err(Error::shape("backward seed", seed_value.shape(), g.shape()));
                }
                g.data().to_vec()
            }
            None => {
                if seed_value.len() != 1 {
                    return Err(Error::Graph(
                        "backward from a non-scalar needs an explicit seed gradient".into(),
                    ));
                }
                vec![T::one()]
            }
        };
        let mut pending: Vec<Option<Vec<T>>> = Vec::new();
        pending.resize_with(si + 1, || None);
        pending[si] = Some(initial);

        for i in (0..=si).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending);
            let node = &mut self.nodes[i];
            if self.retain_all || matches!(node.op, Op::Leaf) {
                let slot = node.value.grad_mut();
                for (s, d) in slot.iter_mut().zip(&g) {
                    *s += *d;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let zeros = |j: usize| vec![T::zero(); nodes[j].value.len()];
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                pending[j].get_or_insert_with(|| zeros(j))
            }};
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Affine { terms, bias } => {
                let (rows, m) = out.rows_cols();
                for &(wi, xi) in terms {
                    let w = &nodes[wi].value;
                    let x = &nodes[xi].value;
                    let n = w.shape()[1];
                    if wants(xi) {
                        // dx = g · W
                        T::gemm(rows, m, n, T::one(), g, false, w.data(), false, T::one(), acc!(xi));
                    }
                    if wants(wi) {
                        // dW = gᵀ · x
                        T::gemm(m, rows, n, T::one(), g, true, x.data(), false, T::one(), acc!(wi));
                    }
                }
                if let Some(bi) = *bias {
                    if wants(bi) {
                        let db = acc!(bi);
                        for r in 0..rows {
                            for (d, &v) in db.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if wants(*a) {
                    add_into(acc!(*a), g);
                }
                if wants(*b) {
                    for (d, &v) in acc!(*b).iter_mut().zip(g) {
                        *d += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if wants(*a) {
                    for ((d, &v), &o) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *d += v * o;
                    }
                }
                if wants(*b) {
                    for ((d, &v), &o) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *d += v * o;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    for ((d, &v), &s) in acc!(*a).iter_mut().zip(g).zip(out.data()) {
                        *d += v * s * (T::one() - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    for ((d, &v), &t) in acc!(*a).iter_mut().zip(g).zip(out.data()) {
                        *d += v * (T::one() - t * t);
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    for (d, &v) in acc!(*a).iter_mut().zip(g) {
                        *d += v * *f;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if wants(*a) {
                    for ((d, &v), &m) in acc!(*a).iter_mut().zip(g).zip(c) {
                        *d += v * m;
                    }
                }
            }
            Op::AddConst(a) => {
                if wants(*a) {
                    add_into(acc!(*a), g);
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    add_into(acc!(*x), g);
                }
                if wants(*b) {
                    let n = nodes[*b].value.len();
                    let db = acc!(*b);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Blend { prev, new, mask } => {
                if wants(*prev) {
                    for ((d, &v), &m) in acc!(*prev).iter_mut().zip(g).zip(mask) {
                        *d += v * m;
                    }
                }
                if wants(*new) {
                    for ((d, &v), &m) in acc!(*new).iter_mut().zip(g).zip(mask) {
                        *d += v * (T::one() - m);
                    }
                }
            }
            Op::Columns { input, start } => {
                if wants(*input) {
                    let (rows, len) = out.rows_cols();
                    let cols = nodes[*input].value.rows_cols().1;
                    let d = acc!(*input);
                    for r in 0..rows {
                        let dst = &mut d[r * cols + start..r * cols + start + len];
                        add_into(dst, &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, n) = out.rows_cols();
                let gv = nodes[*gain].value.data();
                if wants(*gain) {
                    let dg = acc!(*gain);
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * normalized[r * n + j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    for r in 0..rows {
                        add_into(db, &g[r * n..(r + 1) * n]);
                    }
                }
                if wants(*input) {
                    let nf = T::of(n as f64);
                    let dx = acc!(*input);
                    let mut dz = vec![T::zero(); n];
                    for r in 0..rows {
                        let z = &normalized[r * n..(r + 1) * n];
                        for j in 0..n {
                            dz[j] = g[r * n + j] * gv[j];
                        }
                        let mean_dz = dz.iter().copied().sum::<T>() / nf;
                        let mean_dzz = dz.iter().zip(z).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            dx[r * n + j] += inv_std[r] * (dz[j] - mean_dz - z[j] * mean_dzz);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let e = out.rows_cols().1;
                    let d = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let classes = nodes[*logits].value.rows_cols().1;
                    let scale = g[0] / T::of(targets.len() as f64);
                    let d = acc!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            d[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for d in acc!(*a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumScalars(items) => {
                for &j in items {
                    if wants(j) {
                        acc!(j)[0] += g[0];
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `(log Σ exp(z − max), max)`
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&z| (z - max).exp()).sum();
    (s.ln(), max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn identity_backward() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]));
        let y = g.scale(x, 1.0).unwrap();
        g.backward(y, None).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn quadratic_backward() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq).unwrap();
        g.backward(y, None).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq).unwrap();
        g.backward(y, None).unwrap();
        g.backward(y, None).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -8.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn foreign_var_is_graph_error() {
        let mut a = Graph::<f64>::new();
        let mut b = Graph::<f64>::new();
        let x = a.leaf(t(&[1], &[1.0]));
        let _ = b.leaf(t(&[1], &[1.0]));
        assert!(matches!(b.backward(x, None), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_seed_needs_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y, None), Err(Error::Graph(_))));
        g.backward(y, Some(&t(&[2], &[1.0, 1.0]))).unwrap();
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn zero_weight_affine_returns_bias() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2, 3]));
        let x = g.constant(t(&[2, 3], &[5.0, -1.0, 2.0, 0.5, 7.0, 1.0]));
        let b = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.affine(w, x, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn identity_affine() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2], &[3.0, -1.0]));
        let b = g.leaf(Tensor::zeros(&[2]));
        let y = g.affine(w, x, Some(b)).unwrap();
        assert_eq!(g.value(y).shape(), &[2]);
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::<f64>::zeros(&[2, 3]));
        let x = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.affine(w, x, None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 1.0]));
        let s = g.sigmoid(x).unwrap();
        let th = g.tanh(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!((g.value(s).data()[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(g.value(th).data()[0], 0.0);
        let y = g.constant(t(&[3], &[0.0, 1.0, 2.0]));
        assert!(matches!(g.add(x, y), Err(Error::Shape { .. })));
        assert!(matches!(g.mul(x, y), Err(Error::Shape { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.leaf(t(&[2], &[1.0, 1.0]));
        let bias = g.leaf(t(&[2], &[0.0, 0.0]));
        let x = g.constant(t(&[2, 2], &[1.0, -1.0, 4.0, 4.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
        assert!(out[2].abs() < 1e-9 && out[3].abs() < 1e-9);
        assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
    }

    #[test]
    fn softmax_xent_examples() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(&[2, 205]));
        let (loss, probs) = g.softmax_xent(logits, &[3, 204]).unwrap();
        assert!((g.value(loss).data()[0] - 205f64.ln()).abs() < 1e-12);
        assert!((probs.data()[0] - 1.0 / 205.0).abs() < 1e-15);
        assert!(matches!(
            g.softmax_xent(logits, &[0, 205]),
            Err(Error::Index { .. })
        ));
        let mut data = vec![0.0; 5];
        data[2] = 1e9;
        let sure = g.leaf(t(&[1, 5], &data));
        let (loss, _) = g.softmax_xent(sure, &[2]).unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn consumers_and_inputs() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1], &[1.0]));
        let b = g.leaf(t(&[1], &[2.0]));
        let c = g.add(a, b).unwrap();
        let d = g.mul(c, a).unwrap();
        assert_eq!(g.consumers(a), vec![c, d]);
        assert_eq!(g.inputs(d), vec![c, a]);
        assert_eq!(g.op_name(d), "mul");
    }

    #[test]
    fn truncate_keeps_prefix() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1], &[1.0]));
        let b = g.tanh(a).unwrap();
        g.truncate(1);
        assert_eq!(g.len(), 1);
        assert!(g.try_value(b).is_err());
        assert!(g.try_value(a).is_ok());
    }
}
