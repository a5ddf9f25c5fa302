//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are borrowed from a [`ParamStore`] without copying; calling
//! [`Graph::backward`] consumes the tape and returns [`Gradients`] that can be
//! accumulated back into the store.

use std::collections::HashMap;

use super::array::{axis_split, Tensor};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Sqrt(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    MaxReduce {
        x: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumReduce {
        x: usize,
        axis: usize,
    },
    MeanReduce {
        x: usize,
        axis: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    Reshape(usize),
    IndexSelect {
        x: usize,
        indices: Vec<usize>,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::MaxReduce { .. } => "max_reduce",
            Op::SumReduce { .. } => "sum_reduce",
            Op::MeanReduce { .. } => "mean_reduce",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::IndexSelect { .. } => "embedding_lookup",
            Op::MaskedFill { .. } => "masked_fill",
        }
    }
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Single-use: `backward` may be called once.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    track_params: bool,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<'p> Graph<'p> {
    /// A tape reading parameters from `store`. With `track_params`, every
    /// trainable parameter used receives a gradient on `backward`.
    pub fn new(store: &'p ParamStore, track_params: bool) -> Self {
        Graph {
            store: Some(store),
            track_params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            consumed: false,
        }
    }

    /// A tape with no parameter store (leaves only).
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            track_params: false,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param node without store").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Argmax indices recorded by a `max_reduce` node.
    pub fn argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxReduce { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Overflow { op: op.name() });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Node for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let store = self.store.expect("Graph::param on a detached graph");
        let needs_grad = self.track_params && store.get(id).requires_grad;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", ta.shape(), tb.shape()),
                ));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut out = Tensor::zeros(&[m, n]);
            gemm(
                m,
                k,
                n,
                (ta.data(), k as isize, 1),
                (tb.data(), n as isize, 1),
                out.data_mut(),
                0.0,
            );
            out
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(out, Op::MatMul(a.0, b.0), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if t.rank() != 2 {
                return Err(Error::shape("transpose", format!("rank {}", t.rank())));
            }
            transpose2(t)
        };
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Transpose(x.0), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Reshape(x.0), ng)
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
            let mut out = Tensor::zeros(&shape);
            if ta.shape() == tb.shape() {
                for ((o, x), y) in out.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                    *o = f(*x, *y);
                }
            } else {
                let sa = broadcast_strides(ta.shape(), &shape);
                let sb = broadcast_strides(tb.shape(), &shape);
                let (da, db) = (ta.data(), tb.data());
                let od = out.data_mut();
                broadcast_for_each(&shape, &sa, &sb, |o, ia, ib| od[o] = f(da[ia], db[ib]));
            }
            out
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(out, op, ng)
    }

    /// Elementwise sum with broadcasting over size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let data = t.data().iter().map(|v| f(*v)).collect();
            Tensor::new(t.shape().to_vec(), data)?
        };
        let ng = self.needs(&[x.0]);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::sqrt, Op::Sqrt(x.0))
    }

    /// Replace entries where `mask` is true with `value`. `mask` has the
    /// same rank as `x`, with size-1 dimensions broadcast.
    pub fn masked_fill(
        &mut self,
        x: Var,
        mask: &[bool],
        mask_shape: &[usize],
        value: f64,
    ) -> Result<Var> {
        let (out, full_mask) = {
            let t = self.value(x);
            if mask_shape.iter().product::<usize>() != mask.len() {
                return Err(Error::shape(
                    "masked_fill",
                    "mask length disagrees with its shape",
                ));
            }
            let shape = broadcast_shape("masked_fill", t.shape(), mask_shape)?;
            if shape != t.shape() {
                return Err(Error::shape(
                    "masked_fill",
                    format!(
                        "mask {:?} does not broadcast to {:?}",
                        mask_shape,
                        t.shape()
                    ),
                ));
            }
            let sx = broadcast_strides(t.shape(), &shape);
            let sm = broadcast_strides(mask_shape, &shape);
            let mut full = vec![false; t.numel()];
            broadcast_for_each(&shape, &sx, &sm, |o, _, im| full[o] = mask[im]);
            let data = t
                .data()
                .iter()
                .zip(&full)
                .map(|(v, m)| if *m { value } else { *v })
                .collect();
            (Tensor::new(shape, data)?, full)
        };
        let ng = self.needs(&[x.0]);
        self.push(
            out,
            Op::MaskedFill {
                x: x.0,
                mask: full_mask,
            },
            ng,
        )
    }

    // ----- axis operations -------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let r = self.value(x).rank();
        if axis >= r {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for rank {r}"),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let out = {
            let t = self.value(x);
            let (outer, len, inner) = axis_split(t.shape(), axis);
            let mut out = t.clone();
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        mx = mx.max(d[base + j * inner]);
                    }
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (d[base + j * inner] - mx).exp();
                        d[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        d[base + j * inner] /= sum;
                    }
                }
            }
            out
        };
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Softmax { x: x.0, axis }, ng)
    }

    /// Softmax along `axis` with entries where `mask` is false excluded.
    /// Excluded logits are set to -1e9 first.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        axis: usize,
        keep: &[bool],
        keep_shape: &[usize],
    ) -> Result<Var> {
        if keep.iter().all(|k| *k) {
            return self.softmax(x, axis);
        }
        let drop: Vec<bool> = keep.iter().map(|k| !k).collect();
        let filled = self.masked_fill(x, &drop, keep_shape, MASK_LOGIT)?;
        self.softmax(filled, axis)
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape.to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    /// Maximum along `axis` (the axis is removed). Ties resolve to the
    /// lowest index; indices are available via [`Graph::argmax`].
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_reduce", x, axis)?;
        let (out, argmax) = {
            let t = self.value(x);
            let (outer, len, inner) = axis_split(t.shape(), axis);
            if len == 0 {
                return Err(Error::shape("max_reduce", "empty axis"));
            }
            let d = t.data();
            let mut vals = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let (mut best, mut bi) = (d[base], 0);
                    for j in 1..len {
                        let v = d[base + j * inner];
                        if v > best {
                            best = v;
                            bi = j;
                        }
                    }
                    vals.push(best);
                    arg.push(bi);
                }
            }
            (
                Tensor::new(Self::reduced_shape(t.shape(), axis), vals)?,
                arg,
            )
        };
        let ng = self.needs(&[x.0]);
        self.push(
            out,
            Op::MaxReduce {
                x: x.0,
                axis,
                argmax,
            },
            ng,
        )
    }

    fn sum_axis(t: &Tensor, axis: usize, scale: f64) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut vals = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut vals[o * inner..(o + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        if scale != 1.0 {
            vals.iter_mut().for_each(|v| *v *= scale);
        }
        Tensor::new(Self::reduced_shape(t.shape(), axis), vals)
    }

    pub fn sum_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_reduce", x, axis)?;
        let out = Self::sum_axis(self.value(x), axis, 1.0)?;
        let ng = self.needs(&[x.0]);
        self.push(out, Op::SumReduce { x: x.0, axis }, ng)
    }

    pub fn mean_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_reduce", x, axis)?;
        let len = self.value(x).shape()[axis];
        if len == 0 {
            return Err(Error::shape("mean_reduce", "empty axis"));
        }
        let out = Self::sum_axis(self.value(x), axis, 1.0 / len as f64)?;
        let ng = self.needs(&[x.0]);
        self.push(out, Op::MeanReduce { x: x.0, axis }, ng)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_reduce(flat, 0)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let out = {
            let first = self.value(xs[0]).shape().to_vec();
            if axis >= first.len() {
                return Err(Error::shape(
                    "concat",
                    format!("axis {axis} for rank {}", first.len()),
                ));
            }
            let mut total = 0;
            for &v in xs {
                let s = self.value(v).shape();
                let ok = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(k, (a, b))| k == axis || a == b);
                if !ok {
                    return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &v in xs {
                    let t = self.value(v);
                    let len = t.shape()[axis];
                    data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Tensor::new(shape, data)?
        };
        let idx: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.needs(&idx);
        self.push(out, Op::Concat { xs: idx, axis }, ng)
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let out = {
            let t = self.value(x);
            let (outer, full, inner) = axis_split(t.shape(), axis);
            if start + len > full {
                return Err(Error::shape(
                    "narrow",
                    format!("[{start}, {}) outside extent {full}", start + len),
                ));
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            Tensor::new(shape, data)?
        };
        let ng = self.needs(&[x.0]);
        self.push(
            out,
            Op::Narrow {
                x: x.0,
                axis,
                start,
            },
            ng,
        )
    }

    /// Gather rows (first-axis slices) of `x`. With an embedding table as
    /// `x` this is an embedding lookup.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let rows = t.shape()[0];
            let row = t.numel() / rows.max(1);
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                if i >= rows {
                    return Err(Error::shape(
                        "embedding_lookup",
                        format!("index {i} out of range for {rows} rows"),
                    ));
                }
                data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data)?
        };
        let ng = self.needs(&[x.0]);
        self.push(
            out,
            Op::IndexSelect {
                x: x.0,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.index_select(table, ids)
    }

    // ----- reverse pass ------------------------------------------------------

    /// Propagate gradients from the scalar `root` to every tracked node.
    /// The tape is consumed; a second call fails.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].needs_grad {
            return Err(Error::Backward("root does not require grad".into()));
        }
        self.consumed = true;

        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut param_grads: Vec<(ParamId, usize)> = self
            .param_nodes
            .iter()
            .filter(|(_, v)| v.0 < n && grads[v.0].is_some())
            .map(|(id, v)| (*id, v.0))
            .collect();
        param_grads.sort();
        Ok(Gradients { grads, param_grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(Var(*a)), self.value(Var(*b)));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        (g.data(), n as isize, 1),
                        (tb.data(), 1, n as isize),
                        da.data_mut(),
                        0.0,
                    );
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        (ta.data(), 1, k as isize),
                        (g.data(), n as isize, 1),
                        db.data_mut(),
                        0.0,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if needs(*a) {
                    let da = reduce_to(g, self.value(Var(*a)).shape(), |go, _| go);
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let db = reduce_to(g, self.value(Var(*b)).shape(), |go, _| sign * go);
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (self.value(Var(*a)), self.value(Var(*b)));
                let shape = g.shape().to_vec();
                let sa = broadcast_strides(ta.shape(), &shape);
                let sb = broadcast_strides(tb.shape(), &shape);
                let (da_in, db_in, gd) = (ta.data(), tb.data(), g.data());
                if needs(*a) {
                    let mut da = Tensor::zeros(ta.shape());
                    let dd = da.data_mut();
                    broadcast_for_each(&shape, &sa, &sb, |o, ia, ib| {
                        dd[ia] += if is_div {
                            gd[o] / db_in[ib]
                        } else {
                            gd[o] * db_in[ib]
                        };
                    });
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(tb.shape());
                    let dd = db.data_mut();
                    broadcast_for_each(&shape, &sa, &sb, |o, ia, ib| {
                        dd[ib] += if is_div {
                            -gd[o] * da_in[ia] / (db_in[ib] * db_in[ib])
                        } else {
                            gd[o] * da_in[ia]
                        };
                    });
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    accumulate(grads, *x, map(g, |v| v * c));
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if needs(*x) {
                    let shape = self.value(Var(*x)).shape().to_vec();
                    accumulate(grads, *x, g.clone().reshaped(&shape)?);
                }
            }
            Op::Tanh(x) | Op::Sigmoid(x) | Op::Relu(x) | Op::Sqrt(x) => {
                if needs(*x) {
                    let y = node.value.as_ref().expect("op value");
                    let xin = self.value(Var(*x));
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(xin.data())
                        .map(|((gv, yv), xv)| match node.op {
                            Op::Tanh(_) => gv * (1.0 - yv * yv),
                            Op::Sigmoid(_) => gv * yv * (1.0 - yv),
                            Op::Relu(_) => {
                                if *xv > 0.0 {
                                    *gv
                                } else {
                                    0.0
                                }
                            }
                            _ => gv / (2.0 * yv),
                        })
                        .collect();
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let y = node.value.as_ref().expect("op value");
                    let (outer, len, inner) = axis_split(y.shape(), *axis);
                    let mut dx = Tensor::zeros(y.shape());
                    let (yd, gd, dd) = (y.data(), g.data(), dx.data_mut());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|j| gd[base + j * inner] * yd[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let k = base + j * inner;
                                dd[k] = yd[k] * (gd[k] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxReduce { x, axis, argmax } => {
                if needs(*x) {
                    let shape = self.value(Var(*x)).shape().to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    let mut dx = Tensor::zeros(&shape);
                    let dd = dx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            dd[o * len * inner + argmax[r] * inner + i] += g.data()[r];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SumReduce { x, axis } | Op::MeanReduce { x, axis } => {
                if needs(*x) {
                    let shape = self.value(Var(*x)).shape().to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    let scale = if matches!(node.op, Op::MeanReduce { .. }) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut dx = Tensor::zeros(&shape);
                    let dd = dx.data_mut();
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dd[(o * len + j) * inner + i] = g.data()[o * inner + i] * scale;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let shape = self.value(Var(x)).shape().to_vec();
                    let len = shape[*axis];
                    if needs(x) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accumulate(grads, x, Tensor::new(shape, data)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if needs(*x) {
                    let shape = self.value(Var(*x)).shape().to_vec();
                    let (outer, full, inner) = axis_split(&shape, *axis);
                    let len = g.shape()[*axis];
                    let mut dx = Tensor::zeros(&shape);
                    let dd = dx.data_mut();
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        dd[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    accumulate(grads, *x, transpose2(g));
                }
            }
            Op::IndexSelect { x, indices } => {
                if needs(*x) {
                    let shape = self.value(Var(*x)).shape().to_vec();
                    let row = shape.iter().skip(1).product::<usize>();
                    let mut dx = Tensor::zeros(&shape);
                    let dd = dx.data_mut();
                    for (k, &i) in indices.iter().enumerate() {
                        for c in 0..row {
                            dd[i * row + c] += g.data()[k * row + c];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaskedFill { x, mask } => {
                if needs(*x) {
                    let data = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(v, m)| if *m { 0.0 } else { *v })
                        .collect();
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
        }
        Ok(())
    }
}

/// Logit assigned to masked-out entries before a softmax.
pub const MASK_LOGIT: f64 = -1e9;

/// Gradients produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_grads: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` was tracked and
    /// reachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.param_grads
            .iter()
            .filter_map(|(id, n)| self.grads[*n].as_ref().map(|g| (*id, g)))
    }

    /// Accumulate (+=) every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|v| f(*v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(&[c, r]);
    let (src, dst) = (t.data(), out.data_mut());
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `c = a · b + beta · c` for strided row-major operands.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the full m×k, k×n and m×n extents addressed
    // by the given strides (checked above in debug builds; every caller
    // derives the extents from the same tensors).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("{:?} vs {:?}", a, b))),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

fn broadcast_for_each(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sum `g` down to `shape` over broadcast dimensions, applying `f`.
fn reduce_to(g: &Tensor, shape: &[usize], f: impl Fn(f64, usize) -> f64) -> Tensor {
    if g.shape() == shape {
        return map(g, |v| f(v, 0));
    }
    let mut out = Tensor::zeros(shape);
    let so = broadcast_strides(shape, g.shape());
    let id: Vec<usize> = vec![0; shape.len()];
    let (gd, od) = (g.data(), out.data_mut());
    broadcast_for_each(g.shape(), &so, &id, |o, i, _| od[i] += f(gd[o], i));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::detached();
        let x = g.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 1).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::detached();
        let i = g.constant(Tensor::eye(3));
        let x = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn max_reduce_reports_values_and_argmax() {
        let mut g = Graph::detached();
        let x = g.constant(t(&[&[1.0, 5.0], &[4.0, 2.0]]));
        let m = g.max_reduce(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0]);
        assert_eq!(g.argmax(m).unwrap(), &[1, 0]);
    }

    #[test]
    fn max_reduce_ties_go_to_lowest_index() {
        let mut g = Graph::detached();
        let x = g.constant(Tensor::row(&[3.0, 7.0, 7.0, 1.0]));
        let m = g.max_reduce(x, 1).unwrap();
        assert_eq!(g.argmax(m).unwrap(), &[1]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::detached();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_leaf_gets_no_gradient() {
        let mut g = Graph::detached();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        let y = g.leaf(Tensor::row(&[3.0]), true);
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        let gy = grads.get(y).map(|t| t.data().to_vec()).unwrap_or(vec![0.0]);
        assert_eq!(gy, vec![0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::detached();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Backward(_))));
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::detached();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::detached();
        let a = g.constant(Tensor::row(&[1e308]));
        let err = g.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::Overflow { op: "scale" }));
    }

    #[test]
    fn masked_softmax_puts_no_mass_on_masked_slots() {
        let mut g = Graph::detached();
        let x = g.constant(Tensor::row(&[5.0, 1.0, 30.0]));
        let y = g
            .masked_softmax(x, 1, &[true, true, false], &[1, 3])
            .unwrap();
        let v = g.value(y).data();
        assert!(v[2] < 1e-12);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_add_bias_gradient_sums_rows() {
        let mut g = Graph::detached();
        let x = g.leaf(Tensor::zeros(&[3, 2]), true);
        let b = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        let y = g.add(x, b).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }
}
