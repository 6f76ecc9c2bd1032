//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated (eager forward),
//! keeping each node's output tensor. [`Graph::backward`] walks the tape in
//! reverse id order, accumulating vector-Jacobian products into per-node
//! buffers, and returns the gradients for every named parameter leaf.
//!
//! The op set is closed: exactly the operations the models in this crate
//! need, each with a hand-written backward kernel that is exercised by
//! finite-difference checks in the test suite.

pub mod grad_check;
mod kernels;

use std::collections::BTreeMap;

use crate::error::{shape, Error, Result};
use crate::tensor::Tensor;

pub use grad_check::grad_check;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input leaf; `name` is set for trainable parameters.
    Leaf { name: Option<String> },
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// Batched matmul over trailing axes; saved (batch, m, k, n).
    Matmul { batch: usize, m: usize, k: usize, n: usize },
    /// Inputs: x, weight[, bias].
    Conv2d { stride: usize, pad: usize },
    Upsample2x,
    AvgPool2x2,
    GlobalAvgPool,
    Relu,
    Silu,
    /// Inputs: x, gamma, beta. Per-(batch, group) stats saved at forward.
    GroupNorm { groups: usize, means: Vec<f64>, inv_stds: Vec<f64> },
    SoftmaxLast,
    /// Keeps a trailing axis of extent 1.
    LogSumExpLast,
    L2NormalizeLast,
    Concat { axis: usize },
    Reshape,
    Transpose { perm: Vec<usize> },
    /// Sum over the last axis, keeping a trailing axis of extent 1.
    SumLast,
    MeanAll,
    SumAll,
    /// Elementwise (a - b)².
    SquaredError,
    /// Input: logits (n, k); mean NLL of the stored labels.
    SoftmaxCrossEntropy { labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by parameter-leaf name, as returned by
/// [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// Wengert tape: eager forward evaluation plus reverse-mode backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// GroupNorm uses four groups throughout the models in this crate.
pub const GROUP_NORM_GROUPS: usize = 4;
/// Variance floor inside group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

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

    /// The forward value computed for `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, op_name: &'static str) -> Result<NodeId> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(op_name, "non-finite value in result"));
        }
        let requires_grad = matches!(op, Op::Leaf { name: Some(_) })
            || inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { name: None }, vec![], value, "constant")
            .expect("tensor values are validated finite at construction")
    }

    /// Named trainable leaf; its gradient appears in [`Gradients`] under
    /// `name` after `backward`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Leaf { name: Some(name.to_string()) }, vec![], value, "param")
            .expect("tensor values are validated finite at construction")
    }

    fn binary_broadcast(&mut self, op: Op, op_name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out_shape = kernels::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            shape(op_name, format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()))
        })?;
        let f: fn(f64, f64) -> f64 = match op {
            Op::Add => |x, y| x + y,
            Op::Sub => |x, y| x - y,
            Op::Mul => |x, y| x * y,
            _ => unreachable!(),
        };
        let data = kernels::bcast_binary(va.data(), va.shape(), vb.data(), vb.shape(), &out_shape, f);
        self.push(op, vec![a, b], Tensor::new(&out_shape, data)?, op_name)
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(Op::Add, "add", a, b)
    }

    /// Elementwise difference with NumPy-style broadcasting.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(Op::Sub, "sub", a, b)
    }

    /// Elementwise product with NumPy-style broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(Op::Mul, "mul", a, b)
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::numeric("scale", "non-finite scale factor"));
        }
        let v = self.value(a).map(|x| c * x)?;
        self.push(Op::Scale(c), vec![a], v, "scale")
    }

    /// Matrix product over the trailing two axes. Both operands must have
    /// the same rank (≥ 2) and identical leading extents.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(shape("matmul", format!("need equal ranks >= 2, got {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        if lead != &sb[..sb.len() - 2] {
            return Err(shape("matmul", format!("leading extents differ: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = lead.iter().product();
        let data = kernels::matmul(va.data(), vb.data(), batch, m, k, n);
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        self.push(
            Op::Matmul { batch, m, k, n },
            vec![a, b],
            Tensor::new(&out_shape, data)?,
            "matmul",
        )
    }

    /// Zero-padded 2-D convolution; `x` is `(b, c_in, h, w)`, `weight` is
    /// `(c_out, c_in, kh, kw)`, optional `bias` is `(c_out)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        if stride != 1 && stride != 2 {
            return Err(Error::param(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (vx, vw) = (self.value(x).clone(), self.value(weight).clone());
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape("conv2d", format!("need 4-d input and weight, got {sx:?}, {sw:?}")));
        }
        let (bs, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_w, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cin != cin_w {
            return Err(shape("conv2d", format!("input has {cin} channels, weight expects {cin_w}")));
        }
        let vb = match bias {
            Some(b) => {
                let vb = self.value(b).clone();
                if vb.shape() != [cout] {
                    return Err(shape("conv2d", format!("bias shape {:?}, expected [{cout}]", vb.shape())));
                }
                Some(vb)
            }
            None => None,
        };
        let ho = kernels::conv2d_out_extent(h, kh, stride, pad)
            .ok_or_else(|| shape("conv2d", format!("kernel {kh} too large for height {h} with pad {pad}")))?;
        let wo = kernels::conv2d_out_extent(w, kw, stride, pad)
            .ok_or_else(|| shape("conv2d", format!("kernel {kw} too large for width {w} with pad {pad}")))?;
        let data = kernels::conv2d(
            vx.data(),
            vw.data(),
            vb.as_ref().map(|t| t.data()),
            bs,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
        );
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push(
            Op::Conv2d { stride, pad },
            inputs,
            Tensor::new(&[bs, cout, ho, wo], data)?,
            "conv2d",
        )
    }

    /// Nearest-neighbour 2x spatial upsample of `(b, c, h, w)`.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        let s = v.shape();
        if s.len() != 4 {
            return Err(shape("upsample2x", format!("need 4-d input, got {s:?}")));
        }
        let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
        let data = kernels::upsample2x(v.data(), bs, c, h, w);
        self.push(Op::Upsample2x, vec![x], Tensor::new(&[bs, c, 2 * h, 2 * w], data)?, "upsample2x")
    }

    /// 2x2 average pool with stride 2; spatial extents must be even.
    pub fn avg_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        let s = v.shape();
        if s.len() != 4 {
            return Err(shape("avg_pool2x2", format!("need 4-d input, got {s:?}")));
        }
        let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape("avg_pool2x2", format!("spatial extents must be even, got {h}x{w}")));
        }
        let data = kernels::avgpool2x2(v.data(), bs, c, h, w);
        self.push(Op::AvgPool2x2, vec![x], Tensor::new(&[bs, c, h / 2, w / 2], data)?, "avg_pool2x2")
    }

    /// Spatial mean: `(b, c, h, w)` → `(b, c)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        let s = v.shape();
        if s.len() != 4 {
            return Err(shape("global_avg_pool", format!("need 4-d input, got {s:?}")));
        }
        let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
        let data = kernels::global_avg_pool(v.data(), bs, c, h * w);
        self.push(Op::GlobalAvgPool, vec![x], Tensor::new(&[bs, c], data)?, "global_avg_pool")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a.max(0.0))?;
        self.push(Op::Relu, vec![x], v, "relu")
    }

    /// x · sigmoid(x).
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a / (1.0 + (-a).exp()))?;
        self.push(Op::Silu, vec![x], v, "silu")
    }

    /// Group normalization of `(b, c, h, w)` over [`GROUP_NORM_GROUPS`]
    /// channel groups, with per-channel scale `gamma` and shift `beta`.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let groups = GROUP_NORM_GROUPS;
        let (vx, vg, vb) = (self.value(x).clone(), self.value(gamma).clone(), self.value(beta).clone());
        let s = vx.shape();
        if s.len() != 4 {
            return Err(shape("group_norm", format!("need 4-d input, got {s:?}")));
        }
        let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
        if c % groups != 0 {
            return Err(shape("group_norm", format!("channels {c} not divisible by {groups} groups")));
        }
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(shape(
                "group_norm",
                format!("gamma/beta must be [{c}], got {:?}, {:?}", vg.shape(), vb.shape()),
            ));
        }
        let (y, means, inv_stds) =
            kernels::group_norm(vx.data(), vg.data(), vb.data(), bs, c, h * w, groups, GROUP_NORM_EPS);
        self.push(
            Op::GroupNorm { groups, means, inv_stds },
            vec![x, gamma, beta],
            Tensor::new(&s, y)?,
            "group_norm",
        )
    }

    fn last_extent(&self, id: NodeId, op: &'static str) -> Result<usize> {
        let s = self.shape(id);
        match s.last() {
            Some(&k) if k > 0 => Ok(k),
            _ => Err(shape(op, format!("need a non-empty last axis, got {s:?}"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let k = self.last_extent(x, "softmax")?;
        let v = self.value(x).clone();
        let data = kernels::softmax_last(v.data(), k);
        self.push(Op::SoftmaxLast, vec![x], Tensor::new(v.shape(), data)?, "softmax")
    }

    /// Log-sum-exp over the last axis; the result keeps a trailing axis of
    /// extent 1.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        let k = self.last_extent(x, "logsumexp")?;
        let v = self.value(x).clone();
        let data = kernels::logsumexp_last(v.data(), k);
        let mut out_shape = v.shape().to_vec();
        *out_shape.last_mut().unwrap() = 1;
        self.push(Op::LogSumExpLast, vec![x], Tensor::new(&out_shape, data)?, "logsumexp")
    }

    /// Scales each row (last axis) to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let k = self.last_extent(x, "l2_normalize")?;
        let v = self.value(x).clone();
        for row in v.data().chunks_exact(k) {
            if row.iter().map(|&a| a * a).sum::<f64>().sqrt() < 1e-12 {
                return Err(Error::numeric("l2_normalize", "row with (near-)zero norm"));
            }
        }
        let data = kernels::l2_normalize_last(v.data(), k);
        self.push(Op::L2NormalizeLast, vec![x], Tensor::new(v.shape(), data)?, "l2_normalize")
    }

    /// Concatenates along `axis`; all other extents must match.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::param("concat needs at least one input"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() {
                return Err(shape("concat", format!("rank mismatch: {first:?} vs {s:?}")));
            }
            for (d, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(shape("concat", format!("extent mismatch off axis {axis}: {first:?} vs {s:?}")));
                }
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let v = self.value(p).clone();
            let extent = v.shape()[axis];
            let chunk = extent * inner;
            for o in 0..outer {
                let src = &v.data()[o * chunk..(o + 1) * chunk];
                let dst_base = o * total * inner + offset * inner;
                data[dst_base..dst_base + chunk].copy_from_slice(src);
            }
            offset += extent;
        }
        self.push(Op::Concat { axis }, parts.to_vec(), Tensor::new(&out_shape, data)?, "concat")
    }

    /// Concatenation along the channel axis (axis 1) of 4-d tensors.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat(parts, 1)
    }

    /// View with a new shape; element count must be unchanged.
    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone();
        let t = v.reshaped(new_shape)?;
        self.push(Op::Reshape, vec![x], t, "reshape")
    }

    /// Axis permutation; `perm` must be a permutation of `0..rank`.
    pub fn transpose(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone();
        let ndim = v.shape().len();
        let mut seen = vec![false; ndim];
        if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::param(format!("transpose perm {perm:?} is not a permutation of 0..{ndim}")));
        }
        let (data, out_shape) = kernels::transpose(v.data(), v.shape(), perm);
        self.push(Op::Transpose { perm: perm.to_vec() }, vec![x], Tensor::new(&out_shape, data)?, "transpose")
    }

    /// Sum over the last axis, keeping a trailing axis of extent 1.
    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        let k = self.last_extent(x, "sum_last")?;
        let v = self.value(x).clone();
        let data: Vec<f64> = v.data().chunks_exact(k).map(|row| row.iter().sum()).collect();
        let mut out_shape = v.shape().to_vec();
        *out_shape.last_mut().unwrap() = 1;
        self.push(Op::SumLast, vec![x], Tensor::new(&out_shape, data)?, "sum_last")
    }

    /// Mean of all elements, as a scalar (shape `[1]`).
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        if v.numel() == 0 {
            return Err(shape("mean_all", "mean of an empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::MeanAll, vec![x], Tensor::new(&[1], vec![m])?, "mean_all")
    }

    /// Sum of all elements, as a scalar (shape `[1]`).
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        let s = v.data().iter().sum::<f64>();
        self.push(Op::SumAll, vec![x], Tensor::new(&[1], vec![s])?, "sum_all")
    }

    /// Elementwise `(a - b)²`; shapes must match exactly.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        if va.shape() != vb.shape() {
            return Err(shape(
                "squared_error",
                format!("shapes must match exactly, got {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .collect();
        self.push(Op::SquaredError, vec![a, b], Tensor::new(va.shape(), data)?, "squared_error")
    }

    /// Mean cross-entropy between row-wise softmax of `logits` `(n, k)` and
    /// integer `labels` (each `< k`). Labels are constants.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits).clone();
        let s = v.shape();
        if s.len() != 2 {
            return Err(shape("softmax_cross_entropy", format!("need (n, k) logits, got {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if n == 0 {
            return Err(shape("softmax_cross_entropy", "empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::param(format!("label {bad} out of range for {k} classes")));
        }
        let loss = kernels::softmax_cross_entropy(v.data(), k, labels);
        self.push(
            Op::SoftmaxCrossEntropy { labels: labels.to_vec() },
            vec![logits],
            Tensor::new(&[1], vec![loss])?,
            "softmax_cross_entropy",
        )
    }

    /// Reverse sweep from the scalar node `loss`. Returns the gradient of
    /// `loss` with respect to every named parameter leaf in the graph;
    /// parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(id, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        let mut by_name = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let g = match &grads[id] {
                    Some(g) => Tensor::new(node.value.shape(), g.clone())?,
                    None => Tensor::zeros(node.value.shape()),
                };
                if by_name.insert(name.clone(), g).is_some() {
                    return Err(Error::param(format!("duplicate parameter leaf name '{name}'")));
                }
            }
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(buf) => {
                for (b, &c) in buf.iter_mut().zip(contribution) {
                    *b += c;
                }
            }
            None => grads[id.0] = Some(contribution.to_vec()),
        }
    }

    fn backprop_node(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| self.nodes[ins[i].0].value.clone();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add | Op::Sub => {
                let out_shape = node.value.shape();
                let da = kernels::reduce_to_shape(dy, out_shape, val(0).shape());
                self.accumulate(grads, ins[0], &da);
                let mut db = kernels::reduce_to_shape(dy, out_shape, val(1).shape());
                if matches!(node.op, Op::Sub) {
                    for v in &mut db {
                        *v = -*v;
                    }
                }
                self.accumulate(grads, ins[1], &db);
            }
            Op::Mul => {
                let (va, vb) = (val(0), val(1));
                let out_shape = node.value.shape();
                let da_full =
                    kernels::bcast_binary(dy, out_shape, vb.data(), vb.shape(), out_shape, |g, b| g * b);
                let da = kernels::reduce_to_shape(&da_full, out_shape, va.shape());
                self.accumulate(grads, ins[0], &da);
                let db_full =
                    kernels::bcast_binary(dy, out_shape, va.data(), va.shape(), out_shape, |g, a| g * a);
                let db = kernels::reduce_to_shape(&db_full, out_shape, vb.shape());
                self.accumulate(grads, ins[1], &db);
            }
            Op::Scale(c) => {
                let da: Vec<f64> = dy.iter().map(|&g| g * c).collect();
                self.accumulate(grads, ins[0], &da);
            }
            Op::Matmul { batch, m, k, n } => {
                let (va, vb) = (val(0), val(1));
                let (da, db) = kernels::matmul_backward(va.data(), vb.data(), dy, *batch, *m, *k, *n);
                self.accumulate(grads, ins[0], &da);
                self.accumulate(grads, ins[1], &db);
            }
            Op::Conv2d { stride, pad } => {
                let (vx, vw) = (val(0), val(1));
                let (sx, sw) = (vx.shape().to_vec(), vw.shape().to_vec());
                let (dx, dw, db) = kernels::conv2d_backward(
                    vx.data(),
                    vw.data(),
                    dy,
                    sx[0],
                    sx[1],
                    sx[2],
                    sx[3],
                    sw[0],
                    sw[2],
                    sw[3],
                    *stride,
                    *pad,
                    ins.len() == 3,
                );
                self.accumulate(grads, ins[0], &dx);
                self.accumulate(grads, ins[1], &dw);
                if let Some(db) = db {
                    self.accumulate(grads, ins[2], &db);
                }
            }
            Op::Upsample2x => {
                let s = val(0).shape().to_vec();
                let dx = kernels::upsample2x_backward(dy, s[0], s[1], s[2], s[3]);
                self.accumulate(grads, ins[0], &dx);
            }
            Op::AvgPool2x2 => {
                let s = val(0).shape().to_vec();
                let dx = kernels::avgpool2x2_backward(dy, s[0], s[1], s[2], s[3]);
                self.accumulate(grads, ins[0], &dx);
            }
            Op::GlobalAvgPool => {
                let vx = val(0);
                let s = vx.shape();
                let hw = s[2] * s[3];
                let mut dx = vec![0.0; vx.numel()];
                for bc in 0..s[0] * s[1] {
                    let g = dy[bc] / hw as f64;
                    for v in &mut dx[bc * hw..(bc + 1) * hw] {
                        *v = g;
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::Relu => {
                let vx = val(0);
                let dx: Vec<f64> = vx
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, ins[0], &dx);
            }
            Op::Silu => {
                let vx = val(0);
                let dx: Vec<f64> = vx
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, ins[0], &dx);
            }
            Op::GroupNorm { groups, means, inv_stds } => {
                let (vx, vg) = (val(0), val(1));
                let s = vx.shape().to_vec();
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    vx.data(),
                    vg.data(),
                    means,
                    inv_stds,
                    dy,
                    s[0],
                    s[1],
                    s[2] * s[3],
                    *groups,
                );
                self.accumulate(grads, ins[0], &dx);
                self.accumulate(grads, ins[1], &dgamma);
                self.accumulate(grads, ins[2], &dbeta);
            }
            Op::SoftmaxLast => {
                let k = *node.value.shape().last().unwrap();
                let dx = kernels::softmax_last_backward(node.value.data(), dy, k);
                self.accumulate(grads, ins[0], &dx);
            }
            Op::LogSumExpLast => {
                let vx = val(0);
                let k = *vx.shape().last().unwrap();
                let dx = kernels::logsumexp_last_backward(vx.data(), node.value.data(), dy, k);
                self.accumulate(grads, ins[0], &dx);
            }
            Op::L2NormalizeLast => {
                let vx = val(0);
                let k = *vx.shape().last().unwrap();
                let dx = kernels::l2_normalize_last_backward(vx.data(), node.value.data(), dy, k);
                self.accumulate(grads, ins[0], &dx);
            }
            Op::Concat { axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0usize;
                for &p in ins {
                    let pv = self.nodes[p.0].value.clone();
                    let extent = pv.shape()[*axis];
                    let chunk = extent * inner;
                    let mut dp = vec![0.0; pv.numel()];
                    for o in 0..outer {
                        let src_base = o * total * inner + offset * inner;
                        dp[o * chunk..(o + 1) * chunk].copy_from_slice(&dy[src_base..src_base + chunk]);
                    }
                    self.accumulate(grads, p, &dp);
                    offset += extent;
                }
            }
            Op::Reshape => {
                self.accumulate(grads, ins[0], dy);
            }
            Op::Transpose { perm } => {
                let inv = kernels::invert_perm(perm);
                let (dx, _) = kernels::transpose(dy, node.value.shape(), &inv);
                self.accumulate(grads, ins[0], &dx);
            }
            Op::SumLast => {
                let vx = val(0);
                let k = *vx.shape().last().unwrap();
                let mut dx = vec![0.0; vx.numel()];
                for (r, chunk) in dx.chunks_exact_mut(k).enumerate() {
                    chunk.fill(dy[r]);
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::MeanAll => {
                let vx = val(0);
                let g = dy[0] / vx.numel() as f64;
                self.accumulate(grads, ins[0], &vec![g; vx.numel()]);
            }
            Op::SumAll => {
                let vx = val(0);
                self.accumulate(grads, ins[0], &vec![dy[0]; vx.numel()]);
            }
            Op::SquaredError => {
                let (va, vb) = (val(0), val(1));
                let da: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .zip(dy)
                    .map(|((&a, &b), &g)| 2.0 * (a - b) * g)
                    .collect();
                let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                self.accumulate(grads, ins[0], &da);
                self.accumulate(grads, ins[1], &db);
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let vx = val(0);
                let k = vx.shape()[1];
                let dx = kernels::softmax_cross_entropy_backward(vx.data(), k, labels, dy[0]);
                self.accumulate(grads, ins[0], &dx);
            }
        }
        Ok(())
    }
}
