//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every forward operation in execution order together
//! with the activations its backward rule needs. [`Graph::backward`] walks the
//! tape from the loss node back to the first node, so nodes are visited in
//! exact reverse topological order. A graph can be differentiated once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    Scale(NodeId, f32),
    Relu(NodeId),
    Sigmoid(NodeId),
    LnEps(NodeId, f32),
    Softmax(NodeId, f32),
    LogSoftmax(NodeId, f32),
    Reshape(NodeId),
    Permute0213(NodeId),
    Concat(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumLast(NodeId),
    MeanRows(NodeId),
    Pick(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the parameters that took part in a graph.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Accumulate into every listed parameter that received a gradient.
    /// Frozen parameters are left untouched.
    pub fn apply<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            if let Some(g) = self.by_param.get(&p.id()) {
                p.accumulate_grad(g);
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    grads: Vec<Option<Vec<f32>>>,
    differentiated: bool,
}

fn shape_with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("non-scalar shape") = last;
    s
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that records its gradient (inspect with [`Graph::grad`]).
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        if let Some(&id) = self.params.get(&p.id()) {
            return id;
        }
        let mut value = p.tensor.clone();
        value.grad = None;
        let id = self.push(value, Op::Leaf, !p.frozen);
        self.params.insert(p.id(), id);
        id
    }

    /// Constant copy of a node's value, cutting gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.input(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::dim(format!(
                "matmul of {sa:?} by {sb:?}: inner dimensions disagree"
            )));
        }
        let (k, m) = (sb[0], sb[1]);
        let av = &self.nodes[a.0].value;
        let n = av.rows();
        let mut out = vec![0.0f32; n * m];
        gemm_acc(av.data(), self.nodes[b.0].value.data(), &mut out, n, k, m);
        let shape = shape_with_last(av.shape(), m);
        let ng = self.ng(&[a, b]);
        Ok(self.push(tensor(shape, out), Op::MatMul(a, b), ng))
    }

    /// `x · W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Batched product of `[B, n, k]` with `[B, k, m]` (or `[B, m, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("batch_matmul of {sa:?} by {sb:?}")));
        }
        let (bs, n, k) = (sa[0], sa[1], sa[2]);
        let (kb, m) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim(format!(
                "batch_matmul of {sa:?} by {sb:?} (trans_b={trans_b}): inner dimensions disagree"
            )));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; bs * n * m];
        for z in 0..bs {
            let ab = &ad[z * n * k..(z + 1) * n * k];
            let bb = &bd[z * k * m..(z + 1) * k * m];
            let ob = &mut out[z * n * m..(z + 1) * n * m];
            if trans_b {
                gemm_acc(ab, &transpose(bb, m, k), ob, n, k, m);
            } else {
                gemm_acc(ab, bb, ob, n, k, m);
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            tensor(vec![bs, n, m], out),
            Op::BatchMatMul { a, b, trans_b },
            ng,
        ))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || *sx.last().unwrap() != sb[0] {
            return Err(Error::dim(format!("bias {sb:?} does not match {sx:?}")));
        }
        let m = sb[0];
        let bv = self.nodes[b.0].value.data().to_vec();
        let xv = &self.nodes[x.0].value;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(&bv).for_each(|(o, b)| *o += b);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x, b]);
        Ok(self.push(tensor(shape, out), Op::AddBias(x, b), ng))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<f32> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect()
        } else if bv.len() == 1 {
            let y = bv.data()[0];
            av.data().iter().map(|x| f(*x, y)).collect()
        } else {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        };
        let shape = av.shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(tensor(shape, data), op, ng))
    }

    /// Elementwise sum; `b` may be a single-element tensor.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Divide by a single-element tensor.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::dim(format!(
                "divisor must be a scalar, got {:?}",
                self.shape(s)
            )));
        }
        self.binary(a, s, Op::DivScalar(a, s), |x, y| x / y)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f32) -> f32) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(tensor(shape, data), op, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `ln(x + eps)`.
    pub fn ln_eps(&mut self, x: NodeId, eps: f32) -> NodeId {
        self.unary(x, Op::LnEps(x, eps), |v| (v + eps).ln())
    }

    fn check_temperature(temperature: f32) -> Result<()> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "temperature must be positive and finite, got {temperature}"
            )))
        }
    }

    /// Softmax over the last dimension of `x / temperature`.
    pub fn softmax(&mut self, x: NodeId, temperature: f32) -> Result<NodeId> {
        Self::check_temperature(temperature)?;
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_row(row, temperature);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(tensor(shape, out), Op::Softmax(x, temperature), ng))
    }

    /// Log-softmax over the last dimension of `x / temperature`.
    pub fn log_softmax(&mut self, x: NodeId, temperature: f32) -> Result<NodeId> {
        Self::check_temperature(temperature)?;
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().for_each(|v| *v /= temperature);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(tensor(shape, out), Op::LogSoftmax(x, temperature), ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("permute_0213 needs rank 4, got {s:?}")));
        }
        let out = permute_0213_kernel(self.nodes[x.0].value.data(), &s);
        let ng = self.ng(&[x]);
        Ok(self.push(
            tensor(vec![s[0], s[2], s[1], s[3]], out),
            Op::Permute0213(x),
            ng,
        ))
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of an empty list"))?;
        let rows = self.shape(*first)[0];
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim(format!(
                    "concat needs 2-D inputs with {rows} rows, got {s:?}"
                )));
            }
        }
        let width: usize = xs.iter().map(|x| self.shape(*x)[1]).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.nodes[x.0].value.row(r));
            }
        }
        let ng = self.ng(xs);
        Ok(self.push(tensor(vec![rows, width], out), Op::Concat(xs.to_vec()), ng))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f32>() / v.len() as f32;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// `[n, m] -> [n]` row sums.
    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let c = v.cols();
        let out: Vec<f32> = v.data().chunks(c).map(|r| r.iter().sum()).collect();
        let n = out.len();
        let ng = self.ng(&[x]);
        self.push(tensor(vec![n], out), Op::SumLast(x), ng)
    }

    /// `[n, m] -> [m]` column means.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (n, c) = (v.rows(), v.cols());
        let mut out = vec![0.0f32; c];
        for row in v.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= n as f32);
        let ng = self.ng(&[x]);
        self.push(tensor(vec![c], out), Op::MeanRows(x), ng)
    }

    /// `[n, m] -> [n]`, element `idx[r]` of each row `r`.
    pub fn pick(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (n, c) = (v.rows(), v.cols());
        if idx.len() != n {
            return Err(Error::dim(format!(
                "pick needs {n} indices, got {}",
                idx.len()
            )));
        }
        if let Some((r, &i)) = idx.iter().enumerate().find(|(_, &i)| i >= c) {
            return Err(Error::dim(format!(
                "pick index {i} out of range {c} at row {r}"
            )));
        }
        let out = idx.iter().enumerate().map(|(r, &i)| v.data()[r * c + i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(tensor(vec![n], out), Op::Pick(x, idx.to_vec()), ng))
    }

    /// Gradient of the last backward pass with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Back-propagates from a scalar `loss` and returns parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::usage(
                "backward called twice on the same graph; run a new forward pass",
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backward_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }

        let mut by_param = HashMap::new();
        for (pid, nid) in &self.params {
            if self.nodes[nid.0].needs_grad {
                if let Some(g) = &grads[nid.0] {
                    by_param.insert(*pid, g.clone());
                }
            }
        }
        self.grads = grads;
        Ok(Gradients { by_param })
    }

    fn backward_node(&self, i: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;

        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let slot = &mut grads[id.0];
            let g = slot.get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(g);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (k, m) = (bv.shape()[0], bv.shape()[1]);
                let n = av.rows();
                if needs(*a) {
                    acc(*a, &mut |g| gemm_acc(dy, &transpose(bv.data(), k, m), g, n, m, k));
                }
                if needs(*b) {
                    acc(*b, &mut |g| gemm_acc(&transpose(av.data(), n, k), dy, g, k, n, m));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bs, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let m = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                let ad = av.data();
                let bd = bv.data();
                if needs(*a) {
                    acc(*a, &mut |g| {
                        for z in 0..bs {
                            let bb = &bd[z * k * m..(z + 1) * k * m];
                            let dz = &dy[z * n * m..(z + 1) * n * m];
                            let gz = &mut g[z * n * k..(z + 1) * n * k];
                            if *trans_b {
                                // b is [m, k]
                                gemm_acc(dz, bb, gz, n, m, k);
                            } else {
                                gemm_acc(dz, &transpose(bb, k, m), gz, n, m, k);
                            }
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |g| {
                        for z in 0..bs {
                            let ab = &ad[z * n * k..(z + 1) * n * k];
                            let dz = &dy[z * n * m..(z + 1) * n * m];
                            let gz = &mut g[z * k * m..(z + 1) * k * m];
                            if *trans_b {
                                gemm_acc(&transpose(dz, n, m), ab, gz, m, n, k);
                            } else {
                                gemm_acc(&transpose(ab, n, k), dz, gz, k, n, m);
                            }
                        }
                    });
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| axpy(g, 1.0, dy));
                let m = val(*b).len();
                acc(*b, &mut |g| {
                    for row in dy.chunks(m) {
                        axpy(g, 1.0, row);
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |g| axpy(g, 1.0, dy));
                let broadcast = val(*b).len() == 1 && val(*a).len() != 1;
                acc(*b, &mut |g| {
                    if broadcast {
                        g[0] += sign * dy.iter().sum::<f32>();
                    } else {
                        axpy(g, sign, dy);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let broadcast = bv.len() == 1 && av.len() != 1;
                acc(*a, &mut |g| {
                    if broadcast {
                        axpy(g, bv[0], dy);
                    } else {
                        for ((gv, d), bb) in g.iter_mut().zip(dy).zip(bv) {
                            *gv += d * bb;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    if broadcast {
                        g[0] += dot(dy, av);
                    } else {
                        for ((gv, d), aa) in g.iter_mut().zip(dy).zip(av) {
                            *gv += d * aa;
                        }
                    }
                });
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s).data()[0];
                acc(*a, &mut |g| axpy(g, 1.0 / sv, dy));
                // d(a/s)/ds = -a/s^2 = -y/s
                acc(*s, &mut |g| g[0] -= dot(dy, y) / sv);
            }
            Op::Scale(x, c) => acc(*x, &mut |g| axpy(g, *c, dy)),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |g| {
                    for ((gv, d), xx) in g.iter_mut().zip(dy).zip(xv) {
                        if *xx > 0.0 {
                            *gv += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((gv, d), s) in g.iter_mut().zip(dy).zip(y) {
                    *gv += d * s * (1.0 - s);
                }
            }),
            Op::LnEps(x, eps) => {
                let xv = val(*x).data();
                acc(*x, &mut |g| {
                    for ((gv, d), xx) in g.iter_mut().zip(dy).zip(xv) {
                        *gv += d / (xx + eps);
                    }
                });
            }
            Op::Softmax(x, t) => {
                let c = node.value.cols();
                acc(*x, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(dr, yr);
                        for ((gv, d), yy) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv += yy * (d - s) / t;
                        }
                    }
                });
            }
            Op::LogSoftmax(x, t) => {
                let c = node.value.cols();
                acc(*x, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                        let s: f32 = dr.iter().sum();
                        for ((gv, d), ly) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv += (d - ly.exp() * s) / t;
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| axpy(g, 1.0, dy)),
            Op::Permute0213(x) => {
                // the permutation is its own inverse on the output shape
                let back = permute_0213_kernel(dy, node.value.shape());
                acc(*x, &mut |g| axpy(g, 1.0, &back));
            }
            Op::Concat(xs) => {
                let rows = node.value.shape()[0];
                let width = node.value.shape()[1];
                let mut offset = 0;
                for x in xs {
                    let w = val(*x).shape()[1];
                    acc(*x, &mut |g| {
                        for r in 0..rows {
                            axpy(
                                &mut g[r * w..(r + 1) * w],
                                1.0,
                                &dy[r * width + offset..r * width + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SumAll(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::MeanAll(x) => {
                let n = val(*x).len() as f32;
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += dy[0] / n));
            }
            Op::SumLast(x) => {
                let c = val(*x).cols();
                acc(*x, &mut |g| {
                    for (gr, d) in g.chunks_mut(c).zip(dy) {
                        gr.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (n, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |g| {
                    for gr in g.chunks_mut(c) {
                        for (gv, d) in gr.iter_mut().zip(dy) {
                            *gv += d / n as f32;
                        }
                    }
                });
            }
            Op::Pick(x, idx) => {
                let c = val(*x).cols();
                acc(*x, &mut |g| {
                    for (r, (&i, d)) in idx.iter().zip(dy).enumerate() {
                        g[r * c + i] += d;
                    }
                });
            }
        }
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// In-place max-subtracted softmax of `row / temperature`.
pub fn softmax_row(row: &mut [f32], temperature: f32) {
    row.iter_mut().for_each(|v| *v /= temperature);
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    y.iter_mut().zip(x).for_each(|(yv, xv)| *yv += a * xv);
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `c[n×m] += a[n×k] · b[k×m]`, row-major. The longer of `m` and `k` runs
/// in the inner loop.
fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
    if m >= k || m >= 16 {
        for i in 0..n {
            let cr = &mut c[i * m..(i + 1) * m];
            for p in 0..k {
                let s = a[i * k + p];
                if s != 0.0 {
                    axpy(cr, s, &b[p * m..(p + 1) * m]);
                }
            }
        }
    } else {
        let bt = transpose(b, k, m);
        for i in 0..n {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..m {
                c[i * m + j] += dot(ar, &bt[j * k..(j + 1) * k]);
            }
        }
    }
}

fn permute_0213_kernel(x: &[f32], s: &[usize]) -> Vec<f32> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0f32; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
