//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the nodes in reverse
//! and accumulates gradients into the leaves that require them. One graph is
//! built per forward/backward cycle and dropped afterwards.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Inputs to `log` are floored at this value unless the graph is strict.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Square,
    Sqrt,
    Negate,
    ScalarMul(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Exp,
    Log,
    Relu,
    Square,
    Sqrt,
    Negate,
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    RowSoftmax {
        a: Var,
    },
    RowLogSumExp {
        a: Var,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        axis: Option<usize>,
        // flat input index chosen for each output element (min/max only)
        picks: Vec<usize>,
    },
    PairwiseSqDists {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gather {
        a: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    strict: bool,
    clamp_events: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects `log`/`sqrt` of out-of-domain inputs instead of clamping.
    pub fn strict() -> Self {
        Graph {
            strict: true,
            ..Self::default()
        }
    }

    /// Number of `log`/`sqrt` evaluations whose input had to be clamped.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
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
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, present after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Value-equal copy with no graph ancestry.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    // ---- element-wise -------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(
            op,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        );
        match (need_b, b) {
            (true, None) => return Err(Error::usage(format!("{op:?} needs two operands"))),
            (false, Some(_)) => return Err(Error::usage(format!("{op:?} takes one operand"))),
            _ => {}
        }
        match op {
            ElementwiseOp::Add => self.binary(BinaryKind::Add, a, b.unwrap()),
            ElementwiseOp::Sub => self.binary(BinaryKind::Sub, a, b.unwrap()),
            ElementwiseOp::Mul => self.binary(BinaryKind::Mul, a, b.unwrap()),
            ElementwiseOp::Div => self.binary(BinaryKind::Div, a, b.unwrap()),
            ElementwiseOp::Exp => self.unary(UnaryKind::Exp, a),
            ElementwiseOp::Log => self.unary(UnaryKind::Log, a),
            ElementwiseOp::Relu => self.unary(UnaryKind::Relu, a),
            ElementwiseOp::Square => self.unary(UnaryKind::Square, a),
            ElementwiseOp::Sqrt => self.unary(UnaryKind::Sqrt, a),
            ElementwiseOp::Negate => self.unary(UnaryKind::Negate, a),
            ElementwiseOp::ScalarMul(c) => self.unary(UnaryKind::Scale(c), a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Negate, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    /// `max(a, floor)` element-wise; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(UnaryKind::ClampMin(floor), a)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let a_map = index_map(&sa, &out_shape);
        let b_map = index_map(&sb, &out_shape);
        let n: usize = out_shape.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = match (&a_map, &b_map) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|o| {
                    let x = av[a_map.as_ref().map_or(o, |m| m[o])];
                    let y = bv[b_map.as_ref().map_or(o, |m| m[o])];
                    f(x, y)
                })
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            },
            rg,
        ))
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        match kind {
            UnaryKind::Log | UnaryKind::Sqrt if self.strict => {
                let bad = x.data().iter().any(|&v| match kind {
                    UnaryKind::Log => v <= 0.0,
                    _ => v < 0.0,
                });
                if bad {
                    return Err(Error::domain(format!("{kind:?} of out-of-domain input")));
                }
            }
            _ => {}
        }
        let mut clamped = 0;
        let value = match kind {
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Log => {
                clamped = x.data().iter().filter(|&&v| v < LOG_FLOOR).count();
                x.map(|v| v.max(LOG_FLOOR).ln())
            }
            UnaryKind::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            UnaryKind::Square => x.map(|v| v * v),
            UnaryKind::Sqrt => {
                clamped = x.data().iter().filter(|&&v| v < 0.0).count();
                x.map(|v| v.max(0.0).sqrt())
            }
            UnaryKind::Negate => x.map(|v| -v),
            UnaryKind::Scale(c) => x.map(|v| c * v),
            UnaryKind::AddScalar(c) => x.map(|v| v + c),
            UnaryKind::ClampMin(c) => x.map(|v| v.max(c)),
        };
        if clamped > 0 {
            self.clamp_events += 1;
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary { kind, a }, rg))
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 {
            return Err(Error::shape(format!("transpose of {:?}", x.shape())));
        }
        let value = transposed(x);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose { a }, rg))
    }

    /// Softmax over each row of a matrix, stabilised by subtracting the row max.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 {
            return Err(Error::shape(format!("row_softmax of {:?}", x.shape())));
        }
        if !x.all_finite() {
            return Err(Error::domain("row_softmax of non-finite input"));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::RowSoftmax { a }, rg))
    }

    /// `log(sum(exp(row)))` for each row of a matrix; output has shape `[m]`.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 || x.cols() == 0 {
            return Err(Error::shape(format!("row_logsumexp of {:?}", x.shape())));
        }
        let out: Vec<f64> = (0..x.rows())
            .map(|i| {
                let row = x.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::RowLogSumExp { a }, rg))
    }

    /// Squared Euclidean distances between all pairs of rows.
    pub fn pairwise_sq_dists(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 || x.rows() == 0 {
            return Err(Error::shape(format!("pairwise_sq_dists of {:?}", x.shape())));
        }
        let value = sq_dist_matrix(x);
        let rg = self.rg(a);
        Ok(self.push(value, Op::PairwiseSqDists { a }, rg))
    }

    // ---- reductions ---------------------------------------------------

    /// Reduces over `axis`, or over everything when `axis` is `None`.
    ///
    /// The reduced axis is removed from the output shape. Min and max route
    /// their gradient to the first extremum along the reduced axis.
    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, x.numel(), 1, Vec::new()),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::shape(format!(
                        "axis {ax} out of range for shape {shape:?}"
                    )));
                }
                let outer: usize = shape[..ax].iter().product();
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                (outer, shape[ax], inner, out_shape)
            }
        };
        if len == 0 && matches!(kind, ReduceKind::Min | ReduceKind::Max | ReduceKind::Mean) {
            return Err(Error::shape(format!("{kind:?} over an empty axis")));
        }
        let d = x.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut picks = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * len * inner + t * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..len).map(|t| d[at(t)]).sum();
                        out.push(if kind == ReduceKind::Mean {
                            s / len as f64
                        } else {
                            s
                        });
                    }
                    ReduceKind::Min | ReduceKind::Max => {
                        let mut best = at(0);
                        for t in 1..len {
                            let c = at(t);
                            let better = if kind == ReduceKind::Min {
                                d[c] < d[best]
                            } else {
                                d[c] > d[best]
                            };
                            if better {
                                best = c;
                            }
                        }
                        out.push(d[best]);
                        picks.push(best);
                    }
                }
            }
        }
        let rg = self.rg(a);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                kind,
                a,
                axis,
                picks,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceKind::Sum, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceKind::Mean, axis)
    }

    pub fn min(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceKind::Min, axis)
    }

    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceKind::Max, axis)
    }

    // ---- shape plumbing -----------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Concatenates the flattened parts and gives the result `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Picks flat elements of `a` by index and arranges them as `shape`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range for {} elements",
                x.len()
            )));
        }
        let data = idx.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather { a, idx }, rg))
    }

    // ---- backward -----------------------------------------------------

    /// Accumulates d`root`/d`leaf` into every reachable leaf that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let root_shape = self.shape(root).to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.node_backward(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = g.numel();
                let ai = |o: usize| a_map.as_ref().map_or(o, |m| m[o]);
                let bi = |o: usize| b_map.as_ref().map_or(o, |m| m[o]);
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    let gad = ga.data_mut();
                    for o in 0..n {
                        let go = g.data()[o];
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => go,
                            BinaryKind::Mul => go * bv.data()[bi(o)],
                            BinaryKind::Div => go / bv.data()[bi(o)],
                        };
                        gad[ai(o)] += d;
                    }
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    let gbd = gb.data_mut();
                    for o in 0..n {
                        let go = g.data()[o];
                        let d = match kind {
                            BinaryKind::Add => go,
                            BinaryKind::Sub => -go,
                            BinaryKind::Mul => go * av.data()[ai(o)],
                            BinaryKind::Div => {
                                let bb = bv.data()[bi(o)];
                                -go * av.data()[ai(o)] / (bb * bb)
                            }
                        };
                        gbd[bi(o)] += d;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&go, &xv), &yv)| match kind {
                        UnaryKind::Exp => go * yv,
                        UnaryKind::Log => {
                            if xv >= LOG_FLOOR {
                                go / xv
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Relu => {
                            if xv > 0.0 {
                                go
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Square => 2.0 * xv * go,
                        UnaryKind::Sqrt => {
                            if yv > 0.0 {
                                0.5 * go / yv
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Negate => -go,
                        UnaryKind::Scale(c) => c * go,
                        UnaryKind::AddScalar(_) => go,
                        UnaryKind::ClampMin(c) => {
                            if xv >= *c {
                                go
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga);
                    out.push((*a, Tensor::new(vec![m, k], ga)?));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb);
                    out.push((*b, Tensor::new(vec![k, n], gb)?));
                }
            }
            Op::Transpose { a } => out.push((*a, transposed(g))),
            Op::RowSoftmax { a } => {
                let n = y.cols();
                let mut gx = vec![0.0; y.numel()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), gx)?));
            }
            Op::RowLogSumExp { a } => {
                let x = self.value(*a);
                let n = x.cols();
                let mut gx = vec![0.0; x.numel()];
                for i in 0..x.rows() {
                    let lse = y.data()[i];
                    for j in 0..n {
                        gx[i * n + j] = g.data()[i] * (x.at(i, j) - lse).exp();
                    }
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), gx)?));
            }
            Op::PairwiseSqDists { a } => {
                // dX = 2 (diag(rowsum S) X - S X) with S = G + G^T
                let x = self.value(*a);
                let (n, d) = (x.rows(), x.cols());
                let mut s = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        s[i * n + j] = g.data()[i * n + j] + g.data()[j * n + i];
                    }
                }
                let mut sx = vec![0.0; n * d];
                gemm(n, n, d, &s, false, x.data(), false, &mut sx);
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    let rs: f64 = s[i * n..(i + 1) * n].iter().sum();
                    for c in 0..d {
                        gx[i * d + c] = 2.0 * (rs * x.at(i, c) - sx[i * d + c]);
                    }
                }
                out.push((*a, Tensor::new(vec![n, d], gx)?));
            }
            Op::Reduce {
                kind,
                a,
                axis,
                picks,
            } => {
                let x = self.value(*a);
                let shape = x.shape();
                let (outer, len, inner) = match axis {
                    None => (1, x.numel(), 1),
                    Some(ax) => (
                        shape[..*ax].iter().product(),
                        shape[*ax],
                        shape[*ax + 1..].iter().product(),
                    ),
                };
                let mut gx = Tensor::zeros(shape);
                let gd = gx.data_mut();
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let f = if *kind == ReduceKind::Mean {
                            1.0 / len as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for i in 0..inner {
                                let go = g.data()[o * inner + i] * f;
                                for t in 0..len {
                                    gd[o * len * inner + t * inner + i] += go;
                                }
                            }
                        }
                    }
                    ReduceKind::Min | ReduceKind::Max => {
                        for (slot, &p) in picks.iter().enumerate() {
                            gd[p] += g.data()[slot];
                        }
                    }
                }
                out.push((*a, gx));
            }
            Op::Reshape { a } => {
                let shape = self.shape(*a).to_vec();
                out.push((*a, g.clone().reshaped(shape)?));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.numel();
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    if self.rg(p) {
                        out.push((p, Tensor::new(pv.shape().to_vec(), slice)?));
                    }
                }
            }
            Op::Gather { a, idx } => {
                let mut gx = Tensor::zeros(self.shape(*a));
                let gd = gx.data_mut();
                for (o, &i) in idx.iter().enumerate() {
                    gd[i] += g.data()[o];
                }
                out.push((*a, gx));
            }
        }
        Ok(out)
    }
}

fn transposed(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose preserves element count")
}

/// Symmetric, zero-diagonal, non-negative matrix of squared row distances.
pub fn sq_dist_matrix(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut gram = vec![0.0; n * n];
    gemm(n, d, n, x.data(), false, x.data(), true, &mut gram);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j]).max(0.0);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], out).expect("n x n")
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// For each flat output index, the flat index into an input of shape `from`.
/// `None` when no broadcasting is needed.
fn index_map(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from == to {
        return None;
    }
    let n: usize = to.iter().product();
    let numel: usize = from.iter().product();
    if numel == 1 {
        return Some(vec![0; n]);
    }
    let rank = to.len();
    let pad = rank - from.len();
    // input stride per output axis, zero where broadcast
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..from.len()).rev() {
        if from[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= from[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0; rank];
    let mut idx = 0;
    for _ in 0..n {
        map.push(idx);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            idx += strides[ax];
            if counter[ax] < to[ax] {
                break;
            }
            idx -= strides[ax] * to[ax];
            counter[ax] = 0;
        }
    }
    Some(map)
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::usage(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= f);
        }
    }
    Ok(norm)
}
