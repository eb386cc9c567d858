use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize>, values: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Tensor },
    BceWithLogits { logits: Var, targets: Tensor },
    StraightThrough(Var),
    MixRows { weights: Var, rows: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Every op appends a node; inputs always precede the
/// nodes that consume them, so reverse insertion order is a valid
/// topological order for the adjoint sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero-filled if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get_data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Shapes of two operands laid out as `(rows, cols)` plus the broadcast result.
struct Broadcast {
    out_shape: Vec<usize>,
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Broadcast {
    fn new(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Self> {
        let (ar, ac) = a.as_matrix();
        let (br, bc) = b.as_matrix();
        let same = a.shape() == b.shape();
        let higher = a.rank() > 2 || b.rank() > 2;
        if higher && !same {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let rows = ar.max(br);
        let cols = ac.max(bc);
        let ok = |r: usize, c: usize| (r == rows || r == 1) && (c == cols || c == 1);
        if !ok(ar, ac) || !ok(br, bc) {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let out_shape = if (ar, ac) == (rows, cols) {
            a.shape().to_vec()
        } else if (br, bc) == (rows, cols) {
            b.shape().to_vec()
        } else {
            vec![rows, cols]
        };
        Ok(Broadcast {
            out_shape,
            rows,
            cols,
            a: (ar, ac),
            b: (br, bc),
        })
    }

    #[inline]
    fn index(dims: (usize, usize), r: usize, c: usize) -> usize {
        let rr = if dims.0 == 1 { 0 } else { r };
        let cc = if dims.1 == 1 { 0 } else { c };
        rr * dims.1 + cc
    }

    fn apply(&self, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        if self.a == self.b {
            return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        }
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(f(
                    a[Self::index(self.a, r, c)],
                    b[Self::index(self.b, r, c)],
                ));
            }
        }
        out
    }

    /// Sum `g(r, c)` over the broadcast grid into a buffer shaped like `dims`.
    fn reduce_into(&self, dims: (usize, usize), dst: &mut [f64], g: impl Fn(usize) -> f64) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                dst[Self::index(dims, r, c)] += g(r * self.cols + c);
            }
        }
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let (m, k1) = match a.rank() {
        1 => (1, a.shape()[0]),
        2 => (a.shape()[0], a.shape()[1]),
        _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
    };
    let (k2, n) = match b.rank() {
        1 => (b.shape()[0], 1),
        2 => (b.shape()[0], b.shape()[1]),
        _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
    };
    if k1 != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let out = match (a.rank(), b.rank()) {
        (1, 1) => vec![],
        (1, 2) => vec![n],
        (2, 1) => vec![m],
        _ => vec![m, n],
    };
    Ok((m, k1, n, out))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(x: &Tensor) -> Vec<f64> {
    let (rows, cols) = x.as_matrix();
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let src = x.row(r);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (a parameter or anything the caller wants adjoints for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, shape) = matmul_dims(ta, tb)?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = Broadcast::new(op, ta, tb)?;
        let out = bc.apply(ta.data(), tb.data(), f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(bc.out_shape, out)?, node, rg))
    }

    /// Elementwise sum; either side may broadcast along a unit row or column axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, cols) = t.as_matrix();
        if cols == 0 || t.rank() == 0 {
            return Err(Error::invalid("softmax", "empty axis"));
        }
        let out = Tensor::new(t.shape().to_vec(), softmax_rows(t))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Concatenation along the last axis. All parts must agree on the other axes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let lead: Vec<usize> = {
            let s = self.shape(*first);
            if s.is_empty() {
                return Err(Error::invalid("concat", "scalar input"));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::invalid("slice", "scalar input"));
        }
        let (rows, cols) = t.as_matrix();
        if start > end || end > cols {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} outside last axis of {:?}", t.shape()),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x: a, start, end }, rg))
    }

    fn check_matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::invalid(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Rows of a matrix selected by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.check_matrix("gather-row", a)?;
        let t = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::invalid("gather-row", format!("row {r} out of {n}")));
            }
            out.extend_from_slice(t.row(r));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Single row as a vector.
    pub fn gather_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let g = self.gather_rows(a, &[row])?;
        let c = self.shape(g)[1];
        self.reshape(g, vec![c])
    }

    /// Functional row replacement: returns a copy of `a` with `rows[j]`
    /// replaced by row `j` of `values`. `a` itself is untouched.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], values: Var) -> Result<Var> {
        let (n, c) = self.check_matrix("scatter-row", a)?;
        let vt = self.value(values);
        let (vr, vc) = vt.as_matrix();
        if vr != rows.len() || vc != c || vt.rank() > 2 {
            return Err(Error::shape("scatter-row", self.shape(a), vt.shape()));
        }
        let mut seen = vec![false; n];
        for &r in rows {
            if r >= n {
                return Err(Error::invalid("scatter-row", format!("row {r} out of {n}")));
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::invalid("scatter-row", format!("row {r} written twice")));
            }
        }
        let mut out = self.value(a).clone();
        for (j, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(&vt.data()[j * c..(j + 1) * c]);
        }
        let rg = self.rg(a) || self.rg(values);
        Ok(self.push(
            out,
            Op::ScatterRows {
                x: a,
                rows: rows.to_vec(),
                values,
            },
            rg,
        ))
    }

    pub fn scatter_row(&mut self, a: Var, row: usize, value: Var) -> Result<Var> {
        self.scatter_rows(a, &[row], value)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Per-row `-Σ_j target_j · log softmax(logits)_j`, computed with
    /// max-subtracted log-sum-exp. A vector input yields a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(Error::shape("cross-entropy", t.shape(), targets.shape()));
        }
        let (rows, cols) = t.as_matrix();
        if cols == 0 || t.rank() == 0 || t.rank() > 2 {
            return Err(Error::invalid("cross-entropy", "empty or unsupported class axis"));
        }
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let l = t.row(r);
            let y = targets.row(r);
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.push(l.iter().zip(y).map(|(&li, &yi)| yi * (lse - li)).sum());
        }
        let shape = if t.rank() == 1 { vec![] } else { vec![rows] };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Per-row sum of Bernoulli cross-entropies `Σ_j softplus(l) - y·l`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() || t.rank() == 0 || t.rank() > 2 {
            return Err(Error::shape("bce", t.shape(), targets.shape()));
        }
        let (rows, _) = t.as_matrix();
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                t.row(r)
                    .iter()
                    .zip(targets.row(r))
                    .map(|(&l, &y)| softplus(l) - y * l)
                    .sum()
            })
            .collect();
        let shape = if t.rank() == 1 { vec![] } else { vec![rows] };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight-through", hard.shape(), self.shape(soft)));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Batched weighted row read: `weights` is `B×k`, `rows` is `(B·k)×q`
    /// holding `B` stacked `k×q` blocks; row `b` of the result is
    /// `Σ_i weights[b,i] · rows[b·k + i]`. A `k`-vector of weights over a
    /// `k×q` matrix yields a `q`-vector.
    pub fn mix_rows(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let w = self.value(weights);
        let m = self.value(rows);
        let (b, k) = w.as_matrix();
        if m.rank() != 2 || w.rank() == 0 || w.rank() > 2 || m.shape()[0] != b * k {
            return Err(Error::shape("mix-rows", w.shape(), m.shape()));
        }
        let q = m.shape()[1];
        let mut out = vec![0.0; b * q];
        for bi in 0..b {
            let dst = &mut out[bi * q..(bi + 1) * q];
            for i in 0..k {
                let wi = w.data()[bi * k + i];
                if wi != 0.0 {
                    for (d, &s) in dst.iter_mut().zip(m.row(bi * k + i)) {
                        *d += wi * s;
                    }
                }
            }
        }
        let shape = if w.rank() == 1 { vec![q] } else { vec![b, q] };
        let rg = self.rg(weights) || self.rg(rows);
        Ok(self.push(Tensor::new(shape, out)?, Op::MixRows { weights, rows }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, lo);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n, _) = matmul_dims(ta, tb).expect("validated in forward");
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, tb.data(), true, da, 1.0);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, db, 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bc = Broadcast::new("backward", ta, tb).expect("validated in forward");
                let (da_fn, db_fn): (Box<dyn Fn(usize) -> f64>, Box<dyn Fn(usize) -> f64>) =
                    match &node.op {
                        Op::Add(..) => (Box::new(|i| g[i]), Box::new(|i| g[i])),
                        Op::Sub(..) => (Box::new(|i| g[i]), Box::new(|i| -g[i])),
                        _ => {
                            let cols = bc.cols;
                            let (ad, bd) = (ta.data(), tb.data());
                            let (adim, bdim) = (bc.a, bc.b);
                            (
                                Box::new(move |i| {
                                    g[i] * bd[Broadcast::index(bdim, i / cols, i % cols)]
                                }),
                                Box::new(move |i| {
                                    g[i] * ad[Broadcast::index(adim, i / cols, i % cols)]
                                }),
                            )
                        }
                    };
                if let Some(da) = self.slot(grads, *a) {
                    bc.reduce_into(bc.a, da, &da_fn);
                }
                if let Some(db) = self.slot(grads, *b) {
                    bc.reduce_into(bc.b, db, &db_fn);
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Tanh(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                        *d += gi * sigmoid(xi);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                }
            }
            Op::Softmax(a) => {
                let (rows, cols) = node.value.as_matrix();
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yi), &gi) in da[span].iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let (rows, total) = node.value.as_matrix();
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (d, &s) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start, end } => {
                let (rows, cols) = self.value(*x).as_matrix();
                let w = end - start;
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let dst = &mut dx[r * cols + start..r * cols + end];
                        for (d, &s) in dst.iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = self.shape(*x)[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, &r) in rows.iter().enumerate() {
                        for (d, &s) in dx[r * c..(r + 1) * c].iter_mut().zip(&g[j * c..(j + 1) * c]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ScatterRows { x, rows, values } => {
                let c = self.shape(*x)[1];
                if let Some(dv) = self.slot(grads, *values) {
                    for (j, &r) in rows.iter().enumerate() {
                        for (d, &s) in dv[j * c..(j + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += s;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let n = dx.len() / c.max(1);
                    let mut replaced = vec![false; n];
                    for &r in rows {
                        replaced[r] = true;
                    }
                    for (r, &skip) in replaced.iter().enumerate() {
                        if !skip {
                            for (d, &s) in dx[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    let s = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let (rows, cols) = t.as_matrix();
                let probs = softmax_rows(t);
                if let Some(dl) = self.slot(grads, *logits) {
                    for r in 0..rows {
                        let yrow = targets.row(r);
                        let mass: f64 = yrow.iter().sum();
                        for c in 0..cols {
                            let i = r * cols + c;
                            dl[i] += g[r] * (probs[i] * mass - yrow[c]);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let t = self.value(*logits);
                let (rows, cols) = t.as_matrix();
                if let Some(dl) = self.slot(grads, *logits) {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            dl[i] += g[r] * (sigmoid(t.data()[i]) - targets.data()[i]);
                        }
                    }
                }
            }
            Op::MixRows { weights, rows } => {
                let w = self.value(*weights);
                let m = self.value(*rows);
                let (b, k) = w.as_matrix();
                let q = m.shape()[1];
                if let Some(dw) = self.slot(grads, *weights) {
                    for bi in 0..b {
                        let gr = &g[bi * q..(bi + 1) * q];
                        for i in 0..k {
                            let dot: f64 = gr.iter().zip(m.row(bi * k + i)).map(|(a, b)| a * b).sum();
                            dw[bi * k + i] += dot;
                        }
                    }
                }
                if let Some(dm) = self.slot(grads, *rows) {
                    for bi in 0..b {
                        let gr = &g[bi * q..(bi + 1) * q];
                        for i in 0..k {
                            let wi = w.data()[bi * k + i];
                            if wi != 0.0 {
                                let row = bi * k + i;
                                for (d, &s) in dm[row * q..(row + 1) * q].iter_mut().zip(gr) {
                                    *d += wi * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
