//! Reverse-mode autodiff over dense-array nodes.
//!
//! A `ValueGraph` is an append-only tape: every operation records its
//! parents and the computed value, so node indices are already a topological
//! order and the backward sweep is a single reverse pass. Graphs are rebuilt
//! per forward pass and confined to one thread.
//!
//! Elementwise binary operations broadcast in the numpy subset the models
//! need: equal shapes, a 1x1 scalar against anything, a 1xM row against NxM,
//! an Nx1 column against NxM.

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};

/// Handle to a node in a `ValueGraph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Digamma(NodeId),
    Lgamma(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumRows(NodeId),
    GatherCols(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    LogSumExpRows(NodeId),
    StopGrad(NodeId),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    is_leaf: bool,
}

/// Append-only record of primitive operations with reverse-mode backward.
#[derive(Debug, Default)]
pub struct ValueGraph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every reached node.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<DenseArray>>,
    shapes: Vec<Vec<usize>>,
}

impl GradientMap {
    /// Gradient of the node, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&DenseArray> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the node, an exact-zero array when nothing reached it
    /// (e.g. parameters behind a stop-gradient).
    pub fn grad_or_zero(&self, id: NodeId) -> DenseArray {
        match self.get(id) {
            Some(g) => g.clone(),
            None => DenseArray::zeros(self.shapes[id.0].clone()),
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (ar, ac) = (dim(a, 0), dim(a, 1));
    let (br, bc) = (dim(b, 0), dim(b, 1));
    let rows = combine(ar, br)
        .ok_or_else(|| Error::shape(format!("cannot broadcast {:?} with {:?}", a, b)))?;
    let cols = combine(ac, bc)
        .ok_or_else(|| Error::shape(format!("cannot broadcast {:?} with {:?}", a, b)))?;
    Ok(vec![rows, cols])
}

fn dim(shape: &[usize], axis: usize) -> usize {
    shape.get(axis).copied().unwrap_or(1)
}

fn combine(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn broadcast_zip(a: &DenseArray, b: &DenseArray, f: impl Fn(f64, f64) -> f64) -> DenseArray {
    let rows = a.rows().max(b.rows());
    let cols = a.cols().max(b.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let ia = if a.rows() == 1 { 0 } else { i };
        let ib = if b.rows() == 1 { 0 } else { i };
        for j in 0..cols {
            let ja = if a.cols() == 1 { 0 } else { j };
            let jb = if b.cols() == 1 { 0 } else { j };
            out.push(f(a.get2(ia, ja), b.get2(ib, jb)));
        }
    }
    DenseArray::from_vec(vec![rows, cols], out).expect("broadcast result shape")
}

/// Sum a gradient down to the shape of the original (possibly broadcast)
/// operand.
fn reduce_to_shape(grad: &DenseArray, target: &[usize]) -> DenseArray {
    let (tr, tc) = (dim(target, 0), dim(target, 1));
    if grad.rows() == tr && grad.cols() == tc {
        return DenseArray::from_vec(target.to_vec(), grad.data().to_vec())
            .expect("same-size reshape");
    }
    let mut out = DenseArray::zeros(target.to_vec());
    for i in 0..grad.rows() {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..grad.cols() {
            let tj = if tc == 1 { 0 } else { j };
            let v = out.get2(ti, tj) + grad.get2(i, j);
            out.set2(ti, tj, v);
        }
    }
    out
}

impl ValueGraph {
    pub fn new() -> Self {
        ValueGraph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].is_leaf
    }

    /// True when the node is a stop-gradient wrapper.
    pub fn is_stop_grad(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::StopGrad(_))
    }

    /// Parent indices of a node in the operation record.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Digamma(a)
            | Op::Lgamma(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumRows(a)
            | Op::GatherCols(a, _)
            | Op::LogSumExpRows(a)
            | Op::StopGrad(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }

    fn push(&mut self, value: DenseArray, op: Op, is_leaf: bool) -> NodeId {
        self.nodes.push(Node { value, op, is_leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable parameter node.
    pub fn leaf(&mut self, value: DenseArray) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input node.
    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(DenseArray::scalar(value))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        broadcast_shape(self.value(a).shape(), self.value(b).shape())?;
        let value = broadcast_zip(self.value(a), self.value(b), f);
        Ok(self.push(value, make(a, b), false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    /// Multiply by a plain constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// Add a plain constant.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, m) = (self.value(b).rows(), self.value(b).cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                n, k, k2, m
            )));
        }
        let mut out = DenseArray::zeros(vec![n, m]);
        for i in 0..n {
            for l in 0..k {
                let av = self.value(a).get2(i, l);
                if av == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let v = out.get2(i, j) + av * self.value(b).get2(l, j);
                    out.set2(i, j, v);
                }
            }
        }
        Ok(self.push(out, Op::MatMul(a, b), false))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> NodeId {
        let value = self.value(a).map(&f);
        self.push(value, make(a), false)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::domain("ln of non-positive entry"));
        }
        Ok(self.unary(a, f64::ln, Op::Ln))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("sqrt of negative entry"));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus)
    }

    pub fn digamma(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::domain("digamma of non-positive entry"));
        }
        Ok(self.unary(a, digamma_unchecked, Op::Digamma))
    }

    pub fn lgamma(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::domain("lgamma of non-positive entry"));
        }
        Ok(self.unary(a, lgamma_unchecked, Op::Lgamma))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(DenseArray::scalar(s), Op::SumAll(a), false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(DenseArray::scalar(s / n), Op::MeanAll(a), false)
    }

    /// Sum along each row: NxM -> Nx1.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data: Vec<f64> = (0..v.rows()).map(|i| v.row_slice(i).iter().sum()).collect();
        let out = DenseArray::column(data);
        self.push(out, Op::SumRows(a), false)
    }

    /// Per-row column pick: out[i] = a[i, idx[i]], NxM -> Nx1.
    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if idx.len() != v.rows() {
            return Err(Error::shape(format!(
                "gather needs one index per row: {} vs {}",
                idx.len(),
                v.rows()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= v.cols()) {
            return Err(Error::contract(format!(
                "gather index {} out of {} columns",
                bad,
                v.cols()
            )));
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| v.get2(i, j)).collect();
        let out = DenseArray::column(data);
        Ok(self.push(out, Op::GatherCols(a, idx.to_vec()), false))
    }

    /// Stack column blocks side by side; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero parts"));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat parts disagree on rows"));
        }
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = DenseArray::zeros(vec![rows, total_cols]);
        let mut col0 = 0;
        for &p in parts {
            let v = self.value(p);
            for i in 0..rows {
                for j in 0..v.cols() {
                    out.set2(i, col0 + j, v.get2(i, j));
                }
            }
            col0 += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), false))
    }

    /// Row-wise log-sum-exp with max-shift stabilization: NxM -> Nx1.
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data: Vec<f64> = (0..v.rows())
            .map(|i| {
                let row = v.row_slice(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let out = DenseArray::column(data);
        self.push(out, Op::LogSumExpRows(a), false)
    }

    /// Pass the value through, block every derivative.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad(a), false)
    }

    /// Numerically stable row softmax built from primitives.
    pub fn softmax_rows(&mut self, logits: NodeId) -> Result<NodeId> {
        let lse = self.log_sum_exp_rows(logits);
        let centered = self.sub(logits, lse)?;
        Ok(self.exp(centered))
    }

    /// Reverse sweep from a scalar-valued root.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(DenseArray::full(self.value(root).shape().to_vec(), 1.0));

        for idx in (0..=root.0).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant | Op::StopGrad(_) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, reduce_to_shape(&g, self.shape_of(*a)));
                    self.accumulate(&mut grads, *b, reduce_to_shape(&g, self.shape_of(*b)));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, reduce_to_shape(&g, self.shape_of(*a)));
                    let neg = g.map(|x| -x);
                    self.accumulate(&mut grads, *b, reduce_to_shape(&neg, self.shape_of(*b)));
                }
                Op::Mul(a, b) => {
                    let ga = broadcast_zip(&g, self.value(*b), |gi, bi| gi * bi);
                    let gb = broadcast_zip(&g, self.value(*a), |gi, ai| gi * ai);
                    self.accumulate(&mut grads, *a, reduce_to_shape(&ga, self.shape_of(*a)));
                    self.accumulate(&mut grads, *b, reduce_to_shape(&gb, self.shape_of(*b)));
                }
                Op::Div(a, b) => {
                    let ga = broadcast_zip(&g, self.value(*b), |gi, bi| gi / bi);
                    self.accumulate(&mut grads, *a, reduce_to_shape(&ga, self.shape_of(*a)));
                    let val = broadcast_zip(self.value(*a), self.value(*b), |ai, bi| {
                        -ai / (bi * bi)
                    });
                    let gb = broadcast_zip(&g, &val, |gi, vi| gi * vi);
                    self.accumulate(&mut grads, *b, reduce_to_shape(&gb, self.shape_of(*b)));
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = DenseArray::zeros(vec![n, k]);
                    for i in 0..n {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g.get2(i, j) * bv.get2(l, j);
                            }
                            ga.set2(i, l, acc);
                        }
                    }
                    let mut gb = DenseArray::zeros(vec![k, m]);
                    for l in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += av.get2(i, l) * g.get2(i, j);
                            }
                            gb.set2(l, j, acc);
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Neg(a) => {
                    self.accumulate(&mut grads, *a, g.map(|x| -x));
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = broadcast_zip(&g, out, |gi, yi| gi * yi);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = broadcast_zip(&g, self.value(*a), |gi, xi| gi / xi);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = broadcast_zip(&g, out, |gi, yi| gi / (2.0 * yi));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = broadcast_zip(&g, out, |gi, ti| gi * (1.0 - ti * ti));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = broadcast_zip(&g, self.value(*a), |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = broadcast_zip(&g, self.value(*a), |gi, xi| {
                        gi / (1.0 + (-xi).exp())
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Digamma(a) => {
                    let ga = broadcast_zip(&g, self.value(*a), |gi, xi| {
                        gi * trigamma_unchecked(xi)
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Lgamma(a) => {
                    let ga = broadcast_zip(&g, self.value(*a), |gi, xi| {
                        gi * digamma_unchecked(xi)
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let gv = g.scalar_value().expect("sum output is scalar");
                    self.accumulate(
                        &mut grads,
                        *a,
                        DenseArray::full(self.shape_of(*a).to_vec(), gv),
                    );
                }
                Op::MeanAll(a) => {
                    let gv = g.scalar_value().expect("mean output is scalar");
                    let n = self.value(*a).len() as f64;
                    self.accumulate(
                        &mut grads,
                        *a,
                        DenseArray::full(self.shape_of(*a).to_vec(), gv / n),
                    );
                }
                Op::SumRows(a) => {
                    let av = self.value(*a);
                    let mut ga = DenseArray::zeros(av.shape().to_vec());
                    for i in 0..av.rows() {
                        for j in 0..av.cols() {
                            ga.set2(i, j, g.get2(i, 0));
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::GatherCols(a, idx_list) => {
                    let av = self.value(*a);
                    let mut ga = DenseArray::zeros(av.shape().to_vec());
                    for (i, &j) in idx_list.iter().enumerate() {
                        ga.set2(i, j, g.get2(i, 0));
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col0 = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let mut gp = DenseArray::zeros(pv.shape().to_vec());
                        for i in 0..pv.rows() {
                            for j in 0..pv.cols() {
                                gp.set2(i, j, g.get2(i, col0 + j));
                            }
                        }
                        self.accumulate(&mut grads, p, gp);
                        col0 += pv.cols();
                    }
                }
                Op::LogSumExpRows(a) => {
                    let av = self.value(*a);
                    let out = &self.nodes[idx].value;
                    let mut ga = DenseArray::zeros(av.shape().to_vec());
                    for i in 0..av.rows() {
                        let lse = out.get2(i, 0);
                        for j in 0..av.cols() {
                            let w = (av.get2(i, j) - lse).exp();
                            ga.set2(i, j, g.get2(i, 0) * w);
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
            }
        }

        Ok(GradientMap {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray>], id: NodeId, g: DenseArray) {
        match &mut grads[id.0] {
            Some(existing) => {
                existing.axpy(1.0, &g).expect("gradient shapes agree");
            }
            slot @ None => *slot = Some(g),
        }
    }
}
