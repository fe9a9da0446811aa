//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, so node inputs always precede the node. [`Graph::backward`] walks
//! the tape once in reverse and sums gradient contributions on fan-out.
//! Model parameters enter the graph by reference to a [`ParamStore`] and
//! receive gradients keyed by [`ParamId`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    attention_backward, attention_forward, axis_split, gemm, layer_norm_forward, softmax_strided,
    AttentionLayout, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, smoothing: f64, count: usize },
    Mix { inputs: Vec<Var>, weights: Var, row: usize },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { params: None, nodes: Vec::new() }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph { params: Some(params), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.params.expect("param graph").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A free input. Gradients are only tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "graph was built without a parameter store");
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "row bias {:?} does not fit {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRow(x, bias), out, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(Op::Scale(x, s), out, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(Op::Relu(x), out, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(Op::Sum(x), out, ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis)?;
        let out = xv.softmax(axis)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax { x, outer, len, inner }, out, ng))
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.cols();
        if width < 2 {
            return Err(Error::Shape(format!("layer norm needs width >= 2, got {width}")));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != width || bv.len() != width {
            return Err(Error::Shape(format!(
                "layer norm affine {:?}/{:?} does not fit width {width}",
                gv.shape(),
                bv.shape()
            )));
        }
        let (y, xhat, rstd) = layer_norm_forward(xv.data(), width, gv.data(), bv.data(), eps);
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, out, ng))
    }

    /// Multi-head attention over packed segments; `q`, `k`, `v` are already projected.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(Error::Shape(format!(
                "attention operands disagree: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if d % layout.heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {} heads", layout.heads)));
        }
        if qv.rows() != layout.queries.total()
            || kv.rows() != layout.keys.total()
            || layout.key_valid.len() != kv.rows()
            || layout.queries.count() != layout.keys.count()
        {
            return Err(Error::Shape("attention layout does not match operands".into()));
        }
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), d, &layout);
        let out = Tensor::new(vec![qv.rows(), d], out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Op::Attention { q, k, v, layout, probs }, out, ng))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let [vocab, d] = tv.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.needs(table);
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, out, ng))
    }

    /// Mean token cross-entropy of `logits` (`T×V`) against `targets`.
    ///
    /// Positions whose target equals `ignore_id` are skipped and excluded
    /// from the mean. `smoothing` mixes the one-hot target with a uniform
    /// distribution.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: Option<usize>,
        smoothing: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let [t, vocab] = lv.dims2()?;
        if targets.len() != t {
            return Err(Error::Shape(format!("{} targets for {t} logit rows", targets.len())));
        }
        let mut probs = lv.data().to_vec();
        softmax_strided(&mut probs, t, vocab, 1);
        let mut kept = Vec::with_capacity(t);
        let mut total = 0.0;
        let mut count = 0;
        for (r, &y) in targets.iter().enumerate() {
            if Some(y) == ignore_id {
                kept.push(None);
                continue;
            }
            if y >= vocab {
                return Err(Error::Index(format!("target {y} outside vocabulary of {vocab}")));
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let nll = lse - row[y];
            let loss = if smoothing > 0.0 {
                let mean_nll = lse - row.iter().sum::<f64>() / vocab as f64;
                (1.0 - smoothing) * nll + smoothing * mean_nll
            } else {
                nll
            };
            total += loss;
            count += 1;
            kept.push(Some(y));
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: kept, probs, smoothing, count },
            Tensor::scalar(value),
            ng,
        ))
    }

    /// `Σ_i weights[row, i] · inputs[i]` over same-shape inputs.
    pub fn mix(&mut self, inputs: &[Var], weights: Var, row: usize) -> Result<Var> {
        let wv = self.value(weights);
        let [rows, c] = wv.dims2()?;
        if c != inputs.len() || row >= rows {
            return Err(Error::Config(format!(
                "mixing table {:?} cannot combine {} inputs at row {row}",
                wv.shape(),
                inputs.len()
            )));
        }
        let first = self.value(inputs[0]);
        let mut out = Tensor::zeros(first.shape());
        for (i, &x) in inputs.iter().enumerate() {
            let xv = self.value(x);
            if xv.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "mixed inputs disagree: {:?} vs {:?}",
                    xv.shape(),
                    first.shape()
                )));
            }
            let w = wv.get(row, i);
            for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += w * v;
            }
        }
        let ng = self.needs(weights) || inputs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::Mix { inputs: inputs.to_vec(), weights, row }, out, ng))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Tensor>> =
            (0..self.params.map_or(0, ParamStore::len)).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut params[id.index()], &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let [m, k] = av.dims2()?;
                    let n = bv.cols();
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                        accumulate(&mut grads[a.0], &Tensor::new(vec![m, k], da)?);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                        accumulate(&mut grads[b.0], &Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], &g);
                    }
                    if self.needs(*bias) {
                        let c = g.cols();
                        let mut db = vec![0.0; c];
                        for (i, v) in g.data().iter().enumerate() {
                            db[i % c] += v;
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads[bias.0], &Tensor::new(shape, db)?);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g.zip_with(self.value(*b), |x, y| x * y)?);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &g.zip_with(self.value(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads[x.0], &g.scale(*s)),
                Op::Relu(x) => {
                    let dx = g.zip_with(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], &Tensor::full(&shape, g.item()));
                }
                Op::Softmax { x, outer, len, inner } => {
                    let y = node.value.as_ref().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut dotp = 0.0;
                            for j in 0..*len {
                                let at = base + j * inner;
                                dotp += g.data()[at] * y.data()[at];
                            }
                            for j in 0..*len {
                                let at = base + j * inner;
                                dx[at] = y.data()[at] * (g.data()[at] - dotp);
                            }
                        }
                    }
                    let shape = y.shape().to_vec();
                    accumulate(&mut grads[x.0], &Tensor::new(shape, dx)?);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.value(*gain).data();
                    let width = gv.len();
                    let rows = xhat.len() / width;
                    let gd = g.data();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut dg = vec![0.0; width];
                        let mut db = vec![0.0; width];
                        for r in 0..rows {
                            for c in 0..width {
                                dg[c] += gd[r * width + c] * xhat[r * width + c];
                                db[c] += gd[r * width + c];
                            }
                        }
                        let gshape = self.value(*gain).shape().to_vec();
                        let bshape = self.value(*bias).shape().to_vec();
                        if self.needs(*gain) {
                            accumulate(&mut grads[gain.0], &Tensor::new(gshape, dg)?);
                        }
                        if self.needs(*bias) {
                            accumulate(&mut grads[bias.0], &Tensor::new(bshape, db)?);
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; xhat.len()];
                        let n = width as f64;
                        for r in 0..rows {
                            let xh = &xhat[r * width..(r + 1) * width];
                            let go = &gd[r * width..(r + 1) * width];
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..width {
                                let dxh = go[c] * gv[c];
                                mean_d += dxh;
                                mean_dx += dxh * xh[c];
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            for c in 0..width {
                                let dxh = go[c] * gv[c];
                                dx[r * width + c] = rstd[r] * (dxh - mean_d - xh[c] * mean_dx);
                            }
                        }
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(&mut grads[x.0], &Tensor::new(shape, dx)?);
                    }
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols();
                    let (dq, dk, dv) =
                        attention_backward(qv.data(), kv.data(), vv.data(), probs, g.data(), d, layout);
                    if self.needs(*q) {
                        accumulate(&mut grads[q.0], &Tensor::new(qv.shape().to_vec(), dq)?);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads[k.0], &Tensor::new(kv.shape().to_vec(), dk)?);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], &Tensor::new(vv.shape().to_vec(), dv)?);
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (x, &gv) in dst.iter_mut().zip(g.row(r)) {
                            *x += gv;
                        }
                    }
                    accumulate(&mut grads[table.0], &dt);
                }
                Op::CrossEntropy { logits, targets, probs, smoothing, count } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let vocab = shape[1];
                    let mut dl = vec![0.0; probs.len()];
                    if *count > 0 {
                        let scale = g.item() / *count as f64;
                        for (r, y) in targets.iter().enumerate() {
                            let Some(y) = y else { continue };
                            for c in 0..vocab {
                                let mut target = *smoothing / vocab as f64;
                                if c == *y {
                                    target += 1.0 - smoothing;
                                }
                                dl[r * vocab + c] = (probs[r * vocab + c] - target) * scale;
                            }
                        }
                    }
                    accumulate(&mut grads[logits.0], &Tensor::new(shape, dl)?);
                }
                Op::Mix { inputs, weights, row } => {
                    let wv = self.value(*weights);
                    if self.needs(*weights) {
                        let mut dw = Tensor::zeros(wv.shape());
                        let c = wv.cols();
                        for (i, &x) in inputs.iter().enumerate() {
                            dw.data_mut()[row * c + i] = crate::tensor::dot(g.data(), self.value(x).data());
                        }
                        accumulate(&mut grads[weights.0], &dw);
                    }
                    for (i, &x) in inputs.iter().enumerate() {
                        if self.needs(x) {
                            accumulate(&mut grads[x.0], &g.scale(wv.get(*row, i)));
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}
