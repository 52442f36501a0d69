use std::collections::HashMap;

use crate::autodiff::params::{GradBuffer, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Concat(NodeId, NodeId),
    Slice { input: NodeId, start: usize },
    Sum(NodeId),
    Scale(NodeId, f64),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Set on leaves bound to a named parameter.
    param: Option<String>,
}

/// Define-by-run computation graph over [`Tensor`] values.
///
/// The graph is rebuilt per training example; nodes are appended in
/// topological order, so the backward pass is a single reverse sweep.
/// Every forward op validates shapes and rejects non-finite outputs.
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softplus in the branch form that stays finite for large |x|.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    /// Drop all nodes but keep allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_cache.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, None)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a named parameter; the value is snapshotted from the
    /// store. Repeated calls for the same name share one node so gradient
    /// contributions from every use accumulate on it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_cache.get(name) {
            return Ok(id);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let id = self.push(Op::Leaf, value, Some(name.to_string()));
        self.param_cache.insert(name.to_string(), id);
        Ok(id)
    }

    fn push(&mut self, op: Op, value: Tensor, param: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, param });
        id
    }

    fn checked_push(&mut self, op_name: &'static str, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(op, value, None))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: ta.shape_str(),
                rhs: tb.shape_str(),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.checked_push(op_name, op, value)
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.checked_push(op_name, op, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape_str(),
                rhs: tb.shape_str(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::new(m, n, data)?;
        self.checked_push("matmul", Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Vertical concatenation; column counts must match.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: ta.shape_str(),
                rhs: tb.shape_str(),
            });
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor::new(ta.rows() + tb.rows(), ta.cols(), data)?;
        self.checked_push("concat", Op::Concat(a, b), value)
    }

    /// Row slice `[start, start + len)`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if start + len > ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: ta.shape_str(),
                rhs: format!("rows [{start}, {})", start + len),
            });
        }
        let cols = ta.cols();
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(len, cols, data)?;
        self.checked_push("slice", Op::Slice { input: a, start }, value)
    }

    /// Sum of all elements, producing a 1x1 scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        self.checked_push("sum", Op::Sum(a), Tensor::scalar(total))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.unary("scale", a, |x| factor * x, Op::Scale(a, factor))
    }

    /// Reverse sweep from a scalar root. Returns the gradient of the root
    /// with respect to every parameter leaf reachable from it. Each call
    /// computes fresh gradients; accumulation across calls happens in the
    /// [`GradBuffer`] / [`ParamStore`] the caller merges into.
    pub fn backward(&self, root: NodeId) -> Result<GradBuffer> {
        let root_t = &self.nodes[root.0].value;
        if root_t.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: root_t.rows(),
                cols: root_t.cols(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g_out = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {
                    // Re-stash so leaves can be harvested below.
                    grads[i] = Some(g_out);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let (da, db) = (ta.data(), tb.data());
                    {
                        // dA = dC * B^T
                        let ga = acc(&mut grads[a.0], m * k);
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g_out[i2 * n + j] * db[p * n + j];
                                }
                                ga[i2 * k + p] += s;
                            }
                        }
                    }
                    {
                        // dB = A^T * dC
                        let gb = acc(&mut grads[b.0], k * n);
                        for p in 0..k {
                            for i2 in 0..m {
                                let a_ip = da[i2 * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += a_ip * g_out[i2 * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads[a.0], g_out.len()), &g_out, 1.0);
                    add_into(acc(&mut grads[b.0], g_out.len()), &g_out, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads[a.0], g_out.len()), &g_out, 1.0);
                    add_into(acc(&mut grads[b.0], g_out.len()), &g_out, -1.0);
                }
                Op::Hadamard(a, b) => {
                    let vb: &[f64] = self.nodes[b.0].value.data();
                    let va: &[f64] = self.nodes[a.0].value.data();
                    {
                        let ga = acc(&mut grads[a.0], g_out.len());
                        for (idx, g) in g_out.iter().enumerate() {
                            ga[idx] += g * vb[idx];
                        }
                    }
                    {
                        let gb = acc(&mut grads[b.0], g_out.len());
                        for (idx, g) in g_out.iter().enumerate() {
                            gb[idx] += g * va[idx];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let out = node.value.data();
                    let ga = acc(&mut grads[a.0], g_out.len());
                    for (idx, g) in g_out.iter().enumerate() {
                        ga[idx] += g * (1.0 - out[idx] * out[idx]);
                    }
                }
                Op::Sigmoid(a) => {
                    let out = node.value.data();
                    let ga = acc(&mut grads[a.0], g_out.len());
                    for (idx, g) in g_out.iter().enumerate() {
                        ga[idx] += g * out[idx] * (1.0 - out[idx]);
                    }
                }
                Op::Softplus(a) => {
                    let inp = self.nodes[a.0].value.data();
                    let ga = acc(&mut grads[a.0], g_out.len());
                    for (idx, g) in g_out.iter().enumerate() {
                        ga[idx] += g * sigmoid(inp[idx]);
                    }
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    let ga = acc(&mut grads[a.0], g_out.len());
                    for (idx, g) in g_out.iter().enumerate() {
                        ga[idx] += g * out[idx];
                    }
                }
                Op::Log(a) => {
                    let inp = self.nodes[a.0].value.data();
                    let ga = acc(&mut grads[a.0], g_out.len());
                    for (idx, g) in g_out.iter().enumerate() {
                        ga[idx] += g / inp[idx];
                    }
                }
                Op::Square(a) => {
                    let inp = self.nodes[a.0].value.data();
                    let ga = acc(&mut grads[a.0], g_out.len());
                    for (idx, g) in g_out.iter().enumerate() {
                        ga[idx] += g * 2.0 * inp[idx];
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    add_into(acc(&mut grads[a.0], na), &g_out[..na], 1.0);
                    let nb = self.nodes[b.0].value.len();
                    add_into(acc(&mut grads[b.0], nb), &g_out[na..], 1.0);
                }
                Op::Slice { input, start } => {
                    let t_in = &self.nodes[input.0].value;
                    let cols = t_in.cols();
                    let ga = acc(&mut grads[input.0], t_in.len());
                    let offset = start * cols;
                    for (idx, g) in g_out.iter().enumerate() {
                        ga[offset + idx] += g;
                    }
                }
                Op::Sum(a) => {
                    let na = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads[a.0], na);
                    for slot in ga.iter_mut() {
                        *slot += g_out[0];
                    }
                }
                Op::Scale(a, factor) => {
                    add_into(acc(&mut grads[a.0], g_out.len()), &g_out, factor);
                }
            }
        }

        let mut buf = GradBuffer::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads[i]) {
                let t = Tensor::new(node.value.rows(), node.value.cols(), g.clone())?;
                buf.accumulate_tensor(name, &t)?;
            }
        }
        Ok(buf)
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
