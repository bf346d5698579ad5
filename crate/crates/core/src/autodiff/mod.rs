//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded eagerly on an append-only tape; node values are
//! computed at construction time and cached, so `forward` is a lookup.
//! `backward` walks the tape in reverse, accumulating gradients into every
//! node. Parents always precede children, which makes the insertion order a
//! topological order and keeps the graph acyclic by construction.

pub mod check;
pub mod kernels;

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub use kernels::{BatchStats, Padding};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    Matmul(NodeId, NodeId),
    Conv3d { x: NodeId, k: NodeId, stride: usize, padding: Padding },
    MaxPool3d { x: NodeId, argmax: Vec<usize> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Sum(NodeId),
    Mean(NodeId),
    Broadcast(NodeId),
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Differentiation tape: owns the node arena of one graph.
///
/// Construction and backward are single-threaded per tape; the heavy kernels
/// parallelize internally. Independent tapes may run on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        // gradients are zero-initialized; the buffer itself materializes on
        // first touch to keep forward-only passes cheap
        nodes.push(Node {
            value,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        NodeId(nodes.len() - 1)
    }

    /// Trainable leaf: participates in gradient accumulation.
    pub fn leaf(&self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf (data, sampled noise, masks).
    pub fn constant(&self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Cached value of a node. Referentially transparent: repeated calls on
    /// the same graph return bit-identical tensors.
    pub fn forward(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn value_item(&self, id: NodeId) -> Result<f64> {
        self.nodes.borrow()[id.0].value.item()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a node (zeros before backward or for nodes
    /// outside the differentiated subgraph).
    pub fn grad(&self, id: NodeId) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        if n.grad.is_empty() {
            Tensor::zeros(n.value.shape())
        } else {
            Tensor::from_parts(n.value.shape().to_vec(), n.grad.clone())
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|id| nodes[id.0].requires_grad)
    }

    fn value_ref<R>(&self, id: NodeId, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id.0].value)
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn binary_same_shape(
        &self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.shape() != vb.shape() {
                return Err(Error::Shape {
                    op: name,
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            }
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        };
        Ok(self.push(value, self.requires(&[a, b]), op))
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    // ── elementwise unary ────────────────────────────────────────────

    fn unary(
        &self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
        check: Option<&'static str>,
    ) -> Result<NodeId> {
        let value = self.value_ref(x, |v| v.map(&f));
        if let Some(name) = check {
            if !value.all_finite() {
                return Err(Error::Numerical { op: name });
            }
        }
        Ok(self.push(value, self.requires(&[x]), op))
    }

    /// `scale * x + offset`, elementwise with constant coefficients.
    pub fn affine(&self, x: NodeId, scale: f64, offset: f64) -> Result<NodeId> {
        self.unary(x, |v| scale * v + offset, Op::Affine { x, scale }, None)
    }

    pub fn neg(&self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), None)
    }

    pub fn sigmoid(&self, x: NodeId) -> Result<NodeId> {
        self.unary(x, sigmoid, Op::Sigmoid(x), None)
    }

    pub fn softplus(&self, x: NodeId) -> Result<NodeId> {
        self.unary(x, softplus, Op::Softplus(x), None)
    }

    pub fn tanh(&self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::tanh, Op::Tanh(x), None)
    }

    pub fn exp(&self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, Op::Exp(x), Some("exp"))
    }

    pub fn log(&self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::ln, Op::Log(x), Some("log"))
    }

    pub fn sqrt(&self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::sqrt, Op::Sqrt(x), Some("sqrt"))
    }

    pub fn clamp(&self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi }, None)
    }

    // ── linear algebra / structure ───────────────────────────────────

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            kernels::matmul(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(value, self.requires(&[a, b]), Op::Matmul(a, b)))
    }

    pub fn conv3d(&self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            kernels::conv3d_forward(&nodes[x.0].value, &nodes[k.0].value, stride, padding)?
        };
        Ok(self.push(
            value,
            self.requires(&[x, k]),
            Op::Conv3d { x, k, stride, padding },
        ))
    }

    pub fn maxpool3d(&self, x: NodeId, window: [usize; 3]) -> Result<NodeId> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            kernels::maxpool3d_forward(&nodes[x.0].value, window)?
        };
        Ok(self.push(value, self.requires(&[x]), Op::MaxPool3d { x, argmax }))
    }

    /// Train-mode batch normalization; also returns the batch statistics so
    /// the caller can update running estimates outside the graph.
    pub fn batchnorm_train(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchStats)> {
        let (value, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            kernels::batchnorm_train_forward(
                &nodes[x.0].value,
                nodes[gamma.0].value.data(),
                nodes[beta.0].value.data(),
            )?
        };
        let id = self.push(
            value,
            self.requires(&[x, gamma, beta]),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std },
        );
        Ok((id, stats))
    }

    pub fn sum(&self, x: NodeId) -> Result<NodeId> {
        let value = self.value_ref(x, |v| Tensor::scalar(v.data().iter().sum()));
        Ok(self.push(value, self.requires(&[x]), Op::Sum(x)))
    }

    pub fn mean(&self, x: NodeId) -> Result<NodeId> {
        let value = self.value_ref(x, |v| {
            Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64)
        });
        Ok(self.push(value, self.requires(&[x]), Op::Mean(x)))
    }

    pub fn broadcast(&self, x: NodeId, target: &[usize]) -> Result<NodeId> {
        let value = self.value_ref(x, |v| kernels::broadcast_forward(v, target))?;
        Ok(self.push(value, self.requires(&[x]), Op::Broadcast(x)))
    }

    pub fn reshape(&self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value_ref(x, |v| v.reshaped(shape.to_vec()))?;
        Ok(self.push(value, self.requires(&[x]), Op::Reshape(x)))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns the gradient map keyed by
    /// leaf identity (constants included, with exactly-zero gradients).
    pub fn backward(&self, root: NodeId) -> Result<BTreeMap<NodeId, Tensor>> {
        if self.backward_done.get() {
            return Err(Error::Config(
                "backward called twice without reset_grads".into(),
            ));
        }
        {
            let nodes = self.nodes.borrow();
            let rv = &nodes[root.0].value;
            if !rv.is_scalar_like() {
                return Err(Error::Shape {
                    op: "backward",
                    lhs: rv.shape().to_vec(),
                    rhs: vec![],
                });
            }
        }
        self.backward_done.set(true);
        let mut nodes = self.nodes.borrow_mut();
        nodes[root.0].grad = vec![1.0];
        let mut live = vec![false; nodes.len()];
        live[root.0] = true;

        for i in (0..=root.0).rev() {
            if !live[i] || !nodes[i].requires_grad {
                continue;
            }
            // take this node's gradient out so parents can be mutated freely
            let grad = std::mem::take(&mut nodes[i].grad);
            if grad.is_empty() {
                continue; // live but never actually reached with gradient
            }
            // gradients only flow into parents that require them; constants
            // keep their exactly-zero gradient
            let wants = |nodes: &[Node], id: NodeId| nodes[id.0].requires_grad;
            let mark = |id: NodeId, live: &mut [bool]| live[id.0] = true;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if wants(&nodes, a) {
                        mark(a, &mut live);
                        accumulate(grad_buf(&mut nodes, a), &grad, 1.0);
                    }
                    if wants(&nodes, b) {
                        mark(b, &mut live);
                        accumulate(grad_buf(&mut nodes, b), &grad, 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if wants(&nodes, a) {
                        mark(a, &mut live);
                        accumulate(grad_buf(&mut nodes, a), &grad, 1.0);
                    }
                    if wants(&nodes, b) {
                        mark(b, &mut live);
                        accumulate(grad_buf(&mut nodes, b), &grad, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if wants(&nodes, a) {
                        mark(a, &mut live);
                        let vb: Vec<f64> = nodes[b.0].value.data().to_vec();
                        let ga = grad_buf(&mut nodes, a);
                        for (t, g) in grad.iter().enumerate() {
                            ga[t] += g * vb[t];
                        }
                    }
                    if wants(&nodes, b) {
                        mark(b, &mut live);
                        let va: Vec<f64> = nodes[a.0].value.data().to_vec();
                        let gb = grad_buf(&mut nodes, b);
                        for (t, g) in grad.iter().enumerate() {
                            gb[t] += g * va[t];
                        }
                    }
                }
                Op::Affine { x, scale } => {
                    let (x, scale) = (*x, *scale);
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        accumulate(grad_buf(&mut nodes, x), &grad, scale);
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let g = Tensor::from_parts(nodes[i].value.shape().to_vec(), grad.clone());
                    if wants(&nodes, a) {
                        mark(a, &mut live);
                        let ga = kernels::matmul_nt(&g, &nodes[b.0].value)?;
                        accumulate(grad_buf(&mut nodes, a), ga.data(), 1.0);
                    }
                    if wants(&nodes, b) {
                        mark(b, &mut live);
                        let gb = kernels::matmul_tn(&nodes[a.0].value, &g)?;
                        accumulate(grad_buf(&mut nodes, b), gb.data(), 1.0);
                    }
                }
                Op::Conv3d { x, k, stride, padding } => {
                    let (x, k, stride, padding) = (*x, *k, *stride, *padding);
                    let g = Tensor::from_parts(nodes[i].value.shape().to_vec(), grad.clone());
                    let (need_x, need_k) = (wants(&nodes, x), wants(&nodes, k));
                    let (gx, gk) = kernels::conv3d_backward(
                        &nodes[x.0].value,
                        &nodes[k.0].value,
                        &g,
                        stride,
                        padding,
                        need_x,
                        need_k,
                    )?;
                    if let (true, Some(gx)) = (need_x, gx) {
                        mark(x, &mut live);
                        accumulate(grad_buf(&mut nodes, x), gx.data(), 1.0);
                    }
                    if let (true, Some(gk)) = (need_k, gk) {
                        mark(k, &mut live);
                        accumulate(grad_buf(&mut nodes, k), gk.data(), 1.0);
                    }
                }
                Op::MaxPool3d { x, argmax } => {
                    let x = *x;
                    if wants(&nodes, x) {
                        let argmax = argmax.clone();
                        mark(x, &mut live);
                        let gx = grad_buf(&mut nodes, x);
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src] += grad[o];
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (xhat, inv_std) = (xhat.clone(), inv_std.clone());
                    let shape = nodes[x.0].value.shape().to_vec();
                    let gvals = nodes[gamma.0].value.data().to_vec();
                    let (gx, ggamma, gbeta) = kernels::batchnorm_train_backward(
                        &grad, &xhat, &inv_std, &gvals, &shape,
                    );
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        accumulate(grad_buf(&mut nodes, x), &gx, 1.0);
                    }
                    if wants(&nodes, gamma) {
                        mark(gamma, &mut live);
                        accumulate(grad_buf(&mut nodes, gamma), &ggamma, 1.0);
                    }
                    if wants(&nodes, beta) {
                        mark(beta, &mut live);
                        accumulate(grad_buf(&mut nodes, beta), &gbeta, 1.0);
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let vx: Vec<f64> = nodes[x.0].value.data().to_vec();
                        let gx = grad_buf(&mut nodes, x);
                        for (t, g) in grad.iter().enumerate() {
                            if vx[t] > 0.0 {
                                gx[t] += g;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let y: Vec<f64> = nodes[i].value.data().to_vec();
                        let gx = grad_buf(&mut nodes, x);
                        for (t, g) in grad.iter().enumerate() {
                            gx[t] += g * y[t] * (1.0 - y[t]);
                        }
                    }
                }
                Op::Softplus(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let vx: Vec<f64> = nodes[x.0].value.data().to_vec();
                        let gx = grad_buf(&mut nodes, x);
                        for (t, g) in grad.iter().enumerate() {
                            gx[t] += g * sigmoid(vx[t]);
                        }
                    }
                }
                Op::Tanh(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let y: Vec<f64> = nodes[i].value.data().to_vec();
                        let gx = grad_buf(&mut nodes, x);
                        for (t, g) in grad.iter().enumerate() {
                            gx[t] += g * (1.0 - y[t] * y[t]);
                        }
                    }
                }
                Op::Exp(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let y: Vec<f64> = nodes[i].value.data().to_vec();
                        let gx = grad_buf(&mut nodes, x);
                        for (t, g) in grad.iter().enumerate() {
                            gx[t] += g * y[t];
                        }
                    }
                }
                Op::Log(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let vx: Vec<f64> = nodes[x.0].value.data().to_vec();
                        let gx = grad_buf(&mut nodes, x);
                        for (t, g) in grad.iter().enumerate() {
                            gx[t] += g / vx[t];
                        }
                    }
                }
                Op::Sqrt(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let y: Vec<f64> = nodes[i].value.data().to_vec();
                        let gx = grad_buf(&mut nodes, x);
                        for (t, g) in grad.iter().enumerate() {
                            gx[t] += g * 0.5 / y[t];
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let vx: Vec<f64> = nodes[x.0].value.data().to_vec();
                        let gx = grad_buf(&mut nodes, x);
                        for (t, g) in grad.iter().enumerate() {
                            if vx[t] >= lo && vx[t] <= hi {
                                gx[t] += g;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let g = grad[0];
                        for t in grad_buf(&mut nodes, x).iter_mut() {
                            *t += g;
                        }
                    }
                }
                Op::Mean(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let n = nodes[x.0].value.numel() as f64;
                        let g = grad[0] / n;
                        for t in grad_buf(&mut nodes, x).iter_mut() {
                            *t += g;
                        }
                    }
                }
                Op::Broadcast(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        let g = Tensor::from_parts(nodes[i].value.shape().to_vec(), grad.clone());
                        let gx =
                            kernels::broadcast_backward(&g, nodes[x.0].value.shape());
                        accumulate(grad_buf(&mut nodes, x), &gx, 1.0);
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    if wants(&nodes, x) {
                        mark(x, &mut live);
                        accumulate(grad_buf(&mut nodes, x), &grad, 1.0);
                    }
                }
            }
            nodes[i].grad = grad;
        }

        let mut out = BTreeMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let grad = if node.grad.is_empty() {
                    Tensor::zeros(node.value.shape())
                } else {
                    Tensor::from_parts(node.value.shape().to_vec(), node.grad.clone())
                };
                out.insert(NodeId(idx), grad);
            }
        }
        Ok(out)
    }

    /// Zero every gradient and re-arm backward.
    pub fn reset_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad.fill(0.0);
        }
        self.backward_done.set(false);
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    if scale == 1.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    }
}

/// Materialize a node's zero gradient buffer and return it mutably.
fn grad_buf(nodes: &mut [Node], id: NodeId) -> &mut Vec<f64> {
    if nodes[id.0].grad.is_empty() {
        nodes[id.0].grad = vec![0.0; nodes[id.0].value.numel()];
    }
    &mut nodes[id.0].grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_of_constants() {
        let t = Tape::new();
        let a = t.constant(Tensor::scalar(2.0));
        let b = t.constant(Tensor::scalar(3.0));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.forward(c).item().unwrap(), 5.0);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let m = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.matmul(i, m).unwrap();
        assert_eq!(t.forward(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.forward(y).item().unwrap(), 0.5);
    }

    #[test]
    fn forward_is_referentially_transparent() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(&[1.5, -0.25, 3.0]));
        let y = t.softplus(x).unwrap();
        assert_eq!(t.forward(y).data(), t.forward(y).data());
    }

    #[test]
    fn square_gradient() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads[&x].item().unwrap(), 6.0);
    }

    #[test]
    fn sum_sigmoid_gradient_at_zero() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(&[0.0; 4]));
        let y = t.sum(t.sigmoid(x).unwrap()).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads[&x].data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn constant_gradient_is_exactly_zero() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads[&c].item().unwrap(), 0.0);
        assert_eq!(grads[&x].item().unwrap(), 5.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(
            t.backward(x),
            Err(Error::Shape { op: "backward", .. })
        ));
    }

    #[test]
    fn second_backward_without_reset_errors() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(t.backward(y).is_err());
        t.reset_grads();
        assert!(t.backward(y).is_ok());
    }

    #[test]
    fn gradients_accumulate_across_paths() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.add(t.mul(x, x).unwrap(), x).unwrap(); // x^2 + x
        let grads = t.backward(y).unwrap();
        assert_eq!(grads[&x].item().unwrap(), 5.0);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let t = Tape::new();
        let a = t.leaf(Tensor::vector(&[1.0, 2.0]));
        let b = t.leaf(Tensor::vector(&[1.0, 2.0, 3.0]));
        match t.add(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn log_of_negative_is_numerical_error() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(-1.0));
        assert!(matches!(t.log(x), Err(Error::Numerical { op: "log" })));
    }
}
