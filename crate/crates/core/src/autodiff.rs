//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation appends a node to a [`Graph`]. Calling
//! [`Graph::backward`] walks the nodes in exact reverse order, accumulates
//! gradients into the trainable [`Parameter`]s of a [`ParamStore`] and then
//! clears the tape. [`Var`] handles carry the tape generation they were
//! recorded under, so a second backward over the same loss is rejected.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_index, broadcast_shape, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Named parameters in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names, ids and trainable flags at another precision; grads dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        match &mut p.grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => p.grad = Some(g.clone()),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    generation: u64,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Sum(usize),
    MaskedNll {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        denom: T,
    },
    StackFrames(usize),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of executed operations.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            idx: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(
            v.generation, self.generation,
            "Var used after its tape was consumed by backward"
        );
        v.idx
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Brings a parameter onto the tape. Frozen parameters become leaves
    /// that do not propagate gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        make: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)?
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape()).map_err(|e| Error::shape(format!("{name}: {e}")))?;
            let ma = broadcast_index(&shape, va.shape());
            let mb = broadcast_index(&shape, vb.shape());
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect();
            Tensor::new(&shape, data)?
        };
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, make(ia, ib), ng))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.map(|x| x * c);
        let ng = self.ng(ia);
        self.push(value, Op::Scale(ia, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.matmul_t(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::MatMulT(ia, ib), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.transpose()?;
        let ng = self.ng(ia);
        Ok(self.push(value, Op::Transpose(ia), ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
        let value = self.nodes[ia]
            .value
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(ia);
        self.push(value, Op::Gelu(ia), ng)
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`
    /// (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let xv = &self.nodes[ix].value;
        let n = xv.cols();
        for (nm, i) in [("gamma", ig), ("beta", ib)] {
            if self.nodes[i].value.len() != n {
                return Err(Error::shape(format!(
                    "layer_norm {nm} {:?} vs input {:?}",
                    self.nodes[i].value.shape(),
                    xv.shape()
                )));
            }
        }
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let rows = xv.len() / n;
        let nt = T::of(n as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let value = Tensor::new(&shape, out)?;
        let xhat = Tensor::new(&shape, xhat)?;
        let ng = self.ng(ix) || self.ng(ig) || self.ng(ib);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x);
        let value = softmax_axis(&self.nodes[ix].value, axis)?;
        let ng = self.ng(ix);
        Ok(self.push(value, Op::Softmax { x: ix, axis }, ng))
    }

    /// Gathers rows of `table` (`[V×d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table);
        let tv = &self.nodes[it].value;
        if tv.rank() != 2 {
            return Err(Error::shape(format!(
                "embedding table must be rank 2, got {:?}",
                tv.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup of zero ids"));
        }
        let (v, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape(format!("token id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        let ng = self.ng(it);
        Ok(self.push(
            value,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let cols = self.nodes[idx[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rank() != 2 || v.cols() != cols {
                return Err(Error::shape(format!(
                    "concat_rows: {:?} does not have {cols} columns",
                    v.shape()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(value, Op::ConcatRows(idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let rows = self.nodes[idx[0]].value.rows();
        let mut cols = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rank() != 2 || v.rows() != rows {
                return Err(Error::shape(format!(
                    "concat_cols: {:?} does not have {rows} rows",
                    v.shape()
                )));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let value = Tensor::new(&[rows, cols], data)?;
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(value, Op::ConcatCols(idx), ng))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let ix = self.idx(x);
        let v = &self.nodes[ix].value;
        if v.rank() != 2 || start >= end || end > v.rows() {
            return Err(Error::shape(format!("slice_rows {start}..{end} of {:?}", v.shape())));
        }
        let c = v.cols();
        let value = Tensor::new(&[end - start, c], v.data()[start * c..end * c].to_vec())?;
        let ng = self.ng(ix);
        Ok(self.push(value, Op::SliceRows { x: ix, start }, ng))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let ix = self.idx(x);
        let v = &self.nodes[ix].value;
        if v.rank() != 2 || start >= end || end > v.cols() {
            return Err(Error::shape(format!("slice_cols {start}..{end} of {:?}", v.shape())));
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let value = Tensor::new(&[v.rows(), end - start], data)?;
        let ng = self.ng(ix);
        Ok(self.push(value, Op::SliceCols { x: ix, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let value = Tensor::scalar(self.nodes[ix].value.sum());
        let ng = self.ng(ix);
        self.push(value, Op::Sum(ix), ng)
    }

    /// Mean over masked positions of `-log softmax(logits)[target]`.
    /// Positions where `mask` is false contribute nothing, whatever their target.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("loss mask selects no positions".into()));
        }
        self.masked_nll(logits, targets, mask, count as f64)
    }

    /// Sum of masked token NLL divided by `denom`. Used to spread one batch
    /// mean over several per-sequence tapes.
    pub fn masked_nll(&mut self, logits: Var, targets: &[usize], mask: &[bool], denom: f64) -> Result<Var> {
        let il = self.idx(logits);
        let lv = &self.nodes[il].value;
        if lv.rank() != 2 || targets.len() != lv.rows() || mask.len() != lv.rows() {
            return Err(Error::shape(format!(
                "masked_cross_entropy: logits {:?}, {} targets, {} mask entries",
                lv.shape(),
                targets.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateBatch("loss mask selects no positions".into()));
        }
        let v = lv.cols();
        let mut total = T::zero();
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= v {
                return Err(Error::shape(format!("target id {t} outside vocabulary of {v}")));
            }
            let row = lv.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let denom = T::of(denom);
        let value = Tensor::scalar(total / denom);
        let ng = self.ng(il);
        Ok(self.push(
            value,
            Op::MaskedNll {
                logits: il,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                denom,
            },
            ng,
        ))
    }

    /// Zero-pads `[T×F]` to a multiple of `factor` rows and folds each group
    /// of `factor` consecutive rows into one row of width `factor·F`.
    pub fn stack_frames(&mut self, x: Var, factor: usize) -> Result<Var> {
        let ix = self.idx(x);
        let v = &self.nodes[ix].value;
        if v.rank() != 2 || factor == 0 {
            return Err(Error::shape(format!("stack_frames by {factor} of {:?}", v.shape())));
        }
        let (t, f) = (v.rows(), v.cols());
        let out_rows = t.div_ceil(factor);
        let mut data = v.data().to_vec();
        data.resize(out_rows * factor * f, T::zero());
        let value = Tensor::new(&[out_rows, factor * f], data)?;
        let ng = self.ng(ix);
        Ok(self.push(value, Op::StackFrames(ix), ng))
    }

    /// Accumulates d(loss)/d(param) into every trainable parameter reachable
    /// from `loss`, then clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if loss.generation != self.generation || loss.idx >= self.nodes.len() {
            return Err(Error::StaleTape);
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.generation += 1;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor::full(nodes[loss.idx].value.shape(), T::one()));

        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, node, &g, &mut grads, store)?;
        }
        Ok(())
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], i: usize, g: Tensor<T>) {
    if !nodes[i].needs_grad {
        return;
    }
    match &mut grads[i] {
        Some(a) => {
            for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_index(g.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    for (&j, &v) in map.iter().zip(g.data()) {
        d[j] += v;
    }
    out
}

fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let map = broadcast_index(shape, x.shape());
    Tensor::new(shape, map.iter().map(|&j| x.data()[j]).collect()).expect("broadcast shape")
}

fn propagate<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
    store: &mut ParamStore<T>,
) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Param(id) => store.accumulate_grad(*id, g),
        Op::Add(a, b) => {
            acc(grads, nodes, *a, reduce_to(g, val(*a).shape()));
            acc(grads, nodes, *b, reduce_to(g, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, reduce_to(g, val(*a).shape()));
            acc(grads, nodes, *b, reduce_to(&g.map(|x| -x), val(*b).shape()));
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                let bb = broadcast_to(val(*b), g.shape());
                let ga = zip(g, &bb, |x, y| x * y);
                acc(grads, nodes, *a, reduce_to(&ga, val(*a).shape()));
            }
            if nodes[*b].needs_grad {
                let aa = broadcast_to(val(*a), g.shape());
                let gb = zip(g, &aa, |x, y| x * y);
                acc(grads, nodes, *b, reduce_to(&gb, val(*b).shape()));
            }
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, g.map(|x| x * *c)),
        Op::MatMul(a, b) => {
            if nodes[*a].needs_grad {
                acc(grads, nodes, *a, g.matmul_t(val(*b))?);
            }
            if nodes[*b].needs_grad {
                acc(grads, nodes, *b, val(*a).t_matmul(g)?);
            }
        }
        Op::MatMulT(a, b) => {
            if nodes[*a].needs_grad {
                acc(grads, nodes, *a, g.matmul(val(*b))?);
            }
            if nodes[*b].needs_grad {
                acc(grads, nodes, *b, g.t_matmul(val(*a))?);
            }
        }
        Op::Transpose(a) => acc(grads, nodes, *a, g.transpose()?),
        Op::Gelu(a) => {
            let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
            let three = T::of(3.0);
            let dx = zip(g, val(*a), |gv, x| {
                let t = (c * (x + k * x * x * x)).tanh();
                let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                gv * d
            });
            acc(grads, nodes, *a, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = xhat.cols();
            let rows = xhat.len() / n;
            let gam = val(*gamma).data();
            if nodes[*gamma].needs_grad || nodes[*beta].needs_grad {
                let mut gg = vec![T::zero(); n];
                let mut gb = vec![T::zero(); n];
                for r in 0..rows {
                    for j in 0..n {
                        let gv = g.data()[r * n + j];
                        gg[j] += gv * xhat.data()[r * n + j];
                        gb[j] += gv;
                    }
                }
                acc(grads, nodes, *gamma, Tensor::new(val(*gamma).shape(), gg)?);
                acc(grads, nodes, *beta, Tensor::new(val(*beta).shape(), gb)?);
            }
            if nodes[*x].needs_grad {
                let nt = T::of(n as f64);
                let mut dx = Vec::with_capacity(xhat.len());
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat.data()[r * n..(r + 1) * n];
                    let mut mean_gh = T::zero();
                    let mut mean_ghx = T::zero();
                    for j in 0..n {
                        let gh = gr[j] * gam[j];
                        mean_gh += gh;
                        mean_ghx += gh * hr[j];
                    }
                    mean_gh = mean_gh / nt;
                    mean_ghx = mean_ghx / nt;
                    for j in 0..n {
                        let gh = gr[j] * gam[j];
                        dx.push(rstd[r] * (gh - mean_gh - hr[j] * mean_ghx));
                    }
                }
                acc(grads, nodes, *x, Tensor::new(xhat.shape(), dx)?);
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, len, inner) = axis_split(y.shape(), *axis);
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for inn in 0..inner {
                    let base = o * len * inner + inn;
                    let mut dotp = T::zero();
                    for a in 0..len {
                        let p = base + a * inner;
                        dotp += g.data()[p] * y.data()[p];
                    }
                    for a in 0..len {
                        let p = base + a * inner;
                        dx[p] = y.data()[p] * (g.data()[p] - dotp);
                    }
                }
            }
            acc(grads, nodes, *x, Tensor::new(y.shape(), dx)?);
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let d = tv.cols();
            let mut dt = Tensor::zeros(tv.shape());
            let data = dt.data_mut();
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    data[id * d + j] += g.data()[r * d + j];
                }
            }
            acc(grads, nodes, *table, dt);
        }
        Op::ConcatRows(parts) => {
            let c = g.cols();
            let mut row = 0;
            for &p in parts {
                let r = val(p).rows();
                if nodes[p].needs_grad {
                    let piece = g.data()[row * c..(row + r) * c].to_vec();
                    acc(grads, nodes, p, Tensor::new(&[r, c], piece)?);
                }
                row += r;
            }
        }
        Op::ConcatCols(parts) => {
            let mut col = 0;
            for &p in parts {
                let (r, c) = (val(p).rows(), val(p).cols());
                if nodes[p].needs_grad {
                    let mut piece = Vec::with_capacity(r * c);
                    for i in 0..r {
                        piece.extend_from_slice(&g.row(i)[col..col + c]);
                    }
                    acc(grads, nodes, p, Tensor::new(&[r, c], piece)?);
                }
                col += c;
            }
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut dx = Tensor::zeros(xv.shape());
            dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            acc(grads, nodes, *x, dx);
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (c, w) = (xv.cols(), g.cols());
            let mut dx = Tensor::zeros(xv.shape());
            let d = dx.data_mut();
            for r in 0..xv.rows() {
                d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
            }
            acc(grads, nodes, *x, dx);
        }
        Op::Sum(x) => acc(grads, nodes, *x, Tensor::full(val(*x).shape(), g.item())),
        Op::MaskedNll {
            logits,
            targets,
            mask,
            denom,
        } => {
            let lv = val(*logits);
            let v = lv.cols();
            let scale = g.item() / *denom;
            let mut dl = Tensor::zeros(lv.shape());
            let d = dl.data_mut();
            for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                if !m {
                    continue;
                }
                let row = lv.row(i);
                let lse = log_sum_exp(row);
                for j in 0..v {
                    d[i * v + j] = (row[j] - lse).exp() * scale;
                }
                d[i * v + t] -= scale;
            }
            acc(grads, nodes, *logits, dl);
        }
        Op::StackFrames(x) => {
            let xv = val(*x);
            let n = xv.len();
            acc(grads, nodes, *x, Tensor::new(xv.shape(), g.data()[..n].to_vec())?);
        }
    }
    Ok(())
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Softmax of `x` along `axis` without recording anything.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let base = o * len * inner + inn;
            let m = (0..len)
                .map(|a| x.data()[base + a * inner])
                .fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for a in 0..len {
                let p = base + a * inner;
                let e = (x.data()[p] - m).exp();
                out[p] = e;
                s += e;
            }
            for a in 0..len {
                out[base + a * inner] = out[base + a * inner] / s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}
