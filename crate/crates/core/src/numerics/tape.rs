//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append [`DiffNode`]s to a [`Tape`]; each node stores its forward
//! value and an op record pointing at its parents. `backward` walks the tape
//! in reverse creation order (a valid topological order, since ops only refer
//! backwards) and accumulates gradients with fixed loop ordering, so repeated
//! runs are bit-identical.
//!
//! A tape is confined to one logical thread. Forward values of finished nodes
//! are never mutated, so reading them while building further ops is safe.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Op record: which primitive produced a node, and from which parents.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    /// Cross-correlation with zero padding; kernel [k,k,Cin,Cout], bias [Cout].
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId },
    Matmul(NodeId, NodeId),
    Transpose2d(NodeId),
    SoftmaxLast(NodeId),
    SumAll(NodeId),
    SumLast(NodeId),
    AddRowVec(NodeId, NodeId),
    ConcatLast(Vec<NodeId>),
    SliceLast { input: NodeId, start: usize, len: usize },
    ConcatRows(Vec<NodeId>),
    GatherRows { input: NodeId, rows: Vec<usize> },
    Reshape(NodeId),
    /// Per-cell dot products of `a` against `b` over a q x q offset window.
    CostVolume { a: NodeId, b: NodeId, q: usize },
    /// Bilinear gather: out(p) = sample(feature, p + flow(p)).
    Warp { feature: NodeId, flow: NodeId },
}

/// One value on the tape together with its gradient slot.
#[derive(Debug)]
pub struct DiffNode {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<DiffNode>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
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

    /// Gradient accumulated by the last `backward` call, if the node
    /// participated in the differentiated subgraph.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(DiffNode { value, grad: None, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── graph construction ──────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.mul_scalar(b, -1.0);
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x + c).collect(),
        )
        .expect("shape preserved");
        let rg = self.requires(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * c).collect(),
        )
        .expect("shape preserved");
        let rg = self.requires(a);
        self.push(out, Op::MulScalar(a, c), rg)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("shape preserved");
        let rg = self.requires(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log. Inputs must be strictly positive.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// 2-d cross-correlation with (k-1)/2 zero padding: input [X,Y,Cin],
    /// kernel [k,k,Cin,Cout], bias [Cout] -> [X,Y,Cout]. k must be odd.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let vi = self.value(input);
        let vk = self.value(kernel);
        let vb = self.value(bias);
        vi.require_rank(3, "conv2d input")?;
        vk.require_rank(4, "conv2d kernel")?;
        vb.require_rank(1, "conv2d bias")?;
        let (x, y, cin) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let (kh, kw, kcin, cout) = (
            vk.shape()[0],
            vk.shape()[1],
            vk.shape()[2],
            vk.shape()[3],
        );
        if kh != kw {
            return Err(Error::Shape(format!("conv2d: kernel must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::Shape(format!("conv2d: kernel size {kh} must be odd")));
        }
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if vb.shape()[0] != cout {
            return Err(Error::Shape(format!(
                "conv2d: kernel emits {cout} channels, bias has {}",
                vb.shape()[0]
            )));
        }
        let out = conv2d_forward(vi, vk, vb, x, y, cin, kh, cout);
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }, rg))
    }

    /// Matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(b);
        va.require_rank(2, "matmul lhs")?;
        vb.require_rank(2, "matmul rhs")?;
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} vs {k2}"
            )));
        }
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        va.require_rank(2, "transpose")?;
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::Transpose2d(a), rg))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().is_empty() {
            return Err(Error::Shape("softmax needs at least rank 1".into()));
        }
        let last = *va.shape().last().unwrap();
        let rows = va.numel() / last;
        let mut data = vec![0.0; va.numel()];
        for r in 0..rows {
            let src = &va.data()[r * last..(r + 1) * last];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &v) in data[r * last..(r + 1) * last].iter_mut().zip(src) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in &mut data[r * last..(r + 1) * last] {
                *o /= denom;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::SoftmaxLast(a), rg))
    }

    /// Sum of every element; returns a rank-0 scalar.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Reduce the last axis by summation.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().is_empty() {
            return Err(Error::Shape("sum_last needs at least rank 1".into()));
        }
        let last = *va.shape().last().unwrap();
        let rows = va.numel() / last;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = va.data()[r * last..(r + 1) * last].iter().sum();
        }
        let shape: Vec<usize> = va.shape()[..va.shape().len() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::SumLast(a), rg))
    }

    /// Broadcast-add a vector [C] across all leading axes of `a` [.., C].
    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let vv = self.value(v);
        vv.require_rank(1, "add_rowvec vector")?;
        let c = vv.shape()[0];
        if va.shape().last() != Some(&c) {
            return Err(Error::Shape(format!(
                "add_rowvec: trailing dim of {:?} vs vector [{c}]",
                va.shape()
            )));
        }
        let rows = va.numel() / c;
        let mut data = vec![0.0; va.numel()];
        for r in 0..rows {
            for j in 0..c {
                data[r * c + j] = va.data()[r * c + j] + vv.data()[j];
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(v);
        Ok(self.push(out, Op::AddRowVec(a, v), rg))
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_last of zero tensors".into()));
        }
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut total_last = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!(
                    "concat_last: leading dims {:?} vs {:?}",
                    lead,
                    s
                )));
            }
            total_last += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total_last];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let c = *v.shape().last().unwrap();
            for r in 0..rows {
                data[r * total_last + offset..r * total_last + offset + c]
                    .copy_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let mut shape = lead;
        shape.push(total_last);
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Slice `len` channels of the last axis starting at `start`.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().is_empty() {
            return Err(Error::Shape("slice_last needs at least rank 1".into()));
        }
        let last = *va.shape().last().unwrap();
        if start + len > last {
            return Err(Error::Shape(format!(
                "slice_last: [{start}, {}) out of last dim {last}",
                start + len
            )));
        }
        let rows = va.numel() / last;
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&va.data()[r * last + start..r * last + start + len]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::SliceLast { input: a, start, len }, rg))
    }

    /// Concatenate along the first axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<NodeId> = parts
            .iter()
            .copied()
            .filter(|&p| self.value(p).shape()[0] != 0)
            .collect();
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of zero rows".into()));
        }
        let trail: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows0 = 0;
        for &p in &parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[1..] != trail[..] {
                return Err(Error::Shape(format!(
                    "concat_rows: trailing dims {:?} vs {:?}",
                    trail, s
                )));
            }
            rows0 += s[0];
        }
        let mut data = Vec::with_capacity(rows0 * trail.iter().product::<usize>());
        for &p in &parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows0];
        shape.extend_from_slice(&trail);
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatRows(parts), rg))
    }

    /// Select rows (first-axis slices) by index; duplicates allowed.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().is_empty() {
            return Err(Error::Shape("gather_rows needs at least rank 1".into()));
        }
        let r0 = va.shape()[0];
        let stride: usize = va.shape()[1..].iter().product();
        for &r in rows {
            if r >= r0 {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: row {r} out of {r0}"
                )));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&va.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&va.shape()[1..]);
        let out = Tensor::new(shape, data)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::GatherRows { input: a, rows: rows.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let n: usize = shape.iter().product();
        if n != va.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} elems) to {:?} ({n} elems)",
                va.shape(),
                va.numel(),
                shape
            )));
        }
        let out = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Cross-modal cost volume: out[x,y,(m+q/2)*q+(n+q/2)] = <a(x,y), b(x+m,y+n)>
    /// for m,n in [-q/2, q/2); out-of-grid neighbors contribute zero.
    pub fn cost_volume(&mut self, a: NodeId, b: NodeId, q: usize) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(b);
        va.require_rank(3, "cost_volume lhs")?;
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "cost_volume: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        if q == 0 || q % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "cost_volume: window q={q} must be even and positive"
            )));
        }
        let (x, y, _c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        if q > x.min(y) {
            return Err(Error::InvalidArgument(format!(
                "cost_volume: q={q} exceeds grid {x}x{y}"
            )));
        }
        let out = cost_volume_forward(va, vb, q);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::CostVolume { a, b, q }, rg))
    }

    /// Bilinear warp: out(p) = sample(feature, p + flow(p)). Samples falling
    /// outside the grid read zeros.
    pub fn warp(&mut self, feature: NodeId, flow: NodeId) -> Result<NodeId> {
        let vf = self.value(feature);
        let vw = self.value(flow);
        vf.require_rank(3, "warp feature")?;
        vw.require_rank(3, "warp flow")?;
        let (x, y, _c) = (vf.shape()[0], vf.shape()[1], vf.shape()[2]);
        if vw.shape()[0] != x || vw.shape()[1] != y || vw.shape()[2] != 2 {
            return Err(Error::Shape(format!(
                "warp: flow {:?} does not match feature {:?}",
                vw.shape(),
                vf.shape()
            )));
        }
        let out = warp_forward(vf, vw);
        let rg = self.requires(feature) || self.requires(flow);
        Ok(self.push(out, Op::Warp { feature, flow }, rg))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients of every
    /// `requires_grad` node reachable from `loss` are accumulated exactly
    /// once; previous gradients on this tape are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&seed_shape, 1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            self.backprop_node(i, &op, &grad)?;
        }
        Ok(())
    }

    fn accum(&mut self, target: NodeId, delta_fn: impl FnOnce(&Tape) -> Tensor) {
        if !self.requires(target) {
            return;
        }
        let delta = delta_fn(self);
        match &mut self.nodes[target.0].grad {
            Some(g) => {
                for (gd, dd) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gd += dd;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, idx: usize, op: &Op, grad: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, |_| grad.clone());
                self.accum(*b, |_| grad.clone());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |t| {
                    elementwise(grad, t.value(b), |g, y| g * y)
                });
                self.accum(b, |t| {
                    elementwise(grad, t.value(a), |g, x| g * x)
                });
            }
            Op::AddScalar(a) => self.accum(*a, |_| grad.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accum(*a, |_| scale(grad, c));
            }
            Op::Relu(a) => {
                let a = *a;
                self.accum(a, |t| {
                    elementwise(grad, t.value(a), |g, x| if x > 0.0 { g } else { 0.0 })
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                // d sigmoid = s(1-s), read from the stored output.
                let out = self.nodes[idx].value.clone();
                self.accum(a, |_| elementwise(grad, &out, |g, s| g * s * (1.0 - s)));
            }
            Op::Exp(a) => {
                let a = *a;
                let out = self.nodes[idx].value.clone();
                self.accum(a, |_| elementwise(grad, &out, |g, e| g * e));
            }
            Op::Ln(a) => {
                let a = *a;
                self.accum(a, |t| elementwise(grad, t.value(a), |g, x| g / x));
            }
            Op::Abs(a) => {
                let a = *a;
                self.accum(a, |t| {
                    elementwise(grad, t.value(a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Conv2d { input, kernel, bias } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let vi = self.value(input).clone();
                let vk = self.value(kernel).clone();
                let (di, dk, db) = conv2d_backward(&vi, &vk, grad);
                self.accum(input, |_| di);
                self.accum(kernel, |_| dk);
                self.accum(bias, |_| db);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.value(a).clone();
                let vb = self.value(b).clone();
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = dC * B^T
                self.accum(a, |_| {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grad.data()[i * n + j] * vb.data()[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    Tensor::new(vec![m, k], da).unwrap()
                });
                // dB = A^T * dC
                self.accum(b, |_| {
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va.data()[i * k + p] * grad.data()[i * n + j];
                            }
                            db[p * n + j] = s;
                        }
                    }
                    Tensor::new(vec![k, n], db).unwrap()
                });
            }
            Op::Transpose2d(a) => {
                let a = *a;
                let (n, m) = (grad.shape()[0], grad.shape()[1]);
                self.accum(a, |_| {
                    let mut da = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] = grad.data()[i * m + j];
                        }
                    }
                    Tensor::new(vec![m, n], da).unwrap()
                });
            }
            Op::SoftmaxLast(a) => {
                let a = *a;
                let out = self.nodes[idx].value.clone();
                let last = *out.shape().last().unwrap();
                let rows = out.numel() / last;
                self.accum(a, |_| {
                    let mut da = vec![0.0; out.numel()];
                    for r in 0..rows {
                        let y = &out.data()[r * last..(r + 1) * last];
                        let g = &grad.data()[r * last..(r + 1) * last];
                        let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..last {
                            da[r * last + j] = y[j] * (g[j] - dot);
                        }
                    }
                    Tensor::new(out.shape().to_vec(), da).unwrap()
                });
            }
            Op::SumAll(a) => {
                let a = *a;
                let g0 = grad.item();
                self.accum(a, |t| Tensor::full(t.value(a).shape(), g0));
            }
            Op::SumLast(a) => {
                let a = *a;
                self.accum(a, |t| {
                    let va = t.value(a);
                    let last = *va.shape().last().unwrap();
                    let rows = va.numel() / last;
                    let mut da = vec![0.0; va.numel()];
                    for r in 0..rows {
                        let g = grad.data()[r];
                        for j in 0..last {
                            da[r * last + j] = g;
                        }
                    }
                    Tensor::new(va.shape().to_vec(), da).unwrap()
                });
            }
            Op::AddRowVec(a, v) => {
                let (a, v) = (*a, *v);
                self.accum(a, |_| grad.clone());
                self.accum(v, |t| {
                    let c = t.value(v).shape()[0];
                    let rows = grad.numel() / c;
                    let mut dv = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dv[j] += grad.data()[r * c + j];
                        }
                    }
                    Tensor::new(vec![c], dv).unwrap()
                });
            }
            Op::ConcatLast(parts) => {
                let parts = parts.clone();
                let total = *grad.shape().last().unwrap();
                let rows = grad.numel() / total;
                let mut offset = 0;
                for p in parts {
                    let c = *self.value(p).shape().last().unwrap();
                    let off = offset;
                    self.accum(p, |t| {
                        let shape = t.value(p).shape().to_vec();
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &grad.data()[r * total + off..r * total + off + c],
                            );
                        }
                        Tensor::new(shape, dp).unwrap()
                    });
                    offset += c;
                }
            }
            Op::SliceLast { input, start, len } => {
                let (input, start, len) = (*input, *start, *len);
                self.accum(input, |t| {
                    let vi = t.value(input);
                    let last = *vi.shape().last().unwrap();
                    let rows = vi.numel() / last;
                    let mut di = vec![0.0; vi.numel()];
                    for r in 0..rows {
                        di[r * last + start..r * last + start + len]
                            .copy_from_slice(&grad.data()[r * len..(r + 1) * len]);
                    }
                    Tensor::new(vi.shape().to_vec(), di).unwrap()
                });
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let count = self.value(p).numel();
                    let off = offset;
                    self.accum(p, |t| {
                        let shape = t.value(p).shape().to_vec();
                        Tensor::new(shape, grad.data()[off..off + count].to_vec()).unwrap()
                    });
                    offset += count;
                }
            }
            Op::GatherRows { input, rows } => {
                let input = *input;
                let rows = rows.clone();
                self.accum(input, |t| {
                    let vi = t.value(input);
                    let stride: usize = vi.shape()[1..].iter().product();
                    let mut di = vec![0.0; vi.numel()];
                    for (m, &r) in rows.iter().enumerate() {
                        for s in 0..stride {
                            di[r * stride + s] += grad.data()[m * stride + s];
                        }
                    }
                    Tensor::new(vi.shape().to_vec(), di).unwrap()
                });
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accum(a, |t| {
                    Tensor::new(t.value(a).shape().to_vec(), grad.data().to_vec()).unwrap()
                });
            }
            Op::CostVolume { a, b, q } => {
                let (a, b, q) = (*a, *b, *q);
                let va = self.value(a).clone();
                let vb = self.value(b).clone();
                let (da, db) = cost_volume_backward(&va, &vb, grad, q);
                self.accum(a, |_| da);
                self.accum(b, |_| db);
            }
            Op::Warp { feature, flow } => {
                let (feature, flow) = (*feature, *flow);
                let vf = self.value(feature).clone();
                let vw = self.value(flow).clone();
                let (df, dw) = warp_backward(&vf, &vw, grad);
                self.accum(feature, |_| df);
                self.accum(flow, |_| dw);
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.numel(), b.numel());
    Tensor::new(
        b.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * c).collect()).unwrap()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    x: usize,
    y: usize,
    cin: usize,
    k: usize,
    cout: usize,
) -> Tensor {
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; x * y * cout];
    for ox in 0..x {
        for oy in 0..y {
            let orow = &mut out[(ox * y + oy) * cout..(ox * y + oy + 1) * cout];
            orow.copy_from_slice(bias.data());
            for dx in 0..k {
                let ix = ox as isize + dx as isize - pad as isize;
                if ix < 0 || ix >= x as isize {
                    continue;
                }
                for dy in 0..k {
                    let iy = oy as isize + dy as isize - pad as isize;
                    if iy < 0 || iy >= y as isize {
                        continue;
                    }
                    let ibase = (ix as usize * y + iy as usize) * cin;
                    let kbase = (dx * k + dy) * cin * cout;
                    for ci in 0..cin {
                        let iv = input.data()[ibase + ci];
                        if iv == 0.0 {
                            continue;
                        }
                        let krow = &kernel.data()[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for co in 0..cout {
                            orow[co] += iv * krow[co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![x, y, cout], out).unwrap()
}

fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (x, y, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let k = kernel.shape()[0];
    let cout = kernel.shape()[3];
    let pad = (k - 1) / 2;
    let mut dinput = vec![0.0; input.numel()];
    let mut dkernel = vec![0.0; kernel.numel()];
    let mut dbias = vec![0.0; cout];

    for ox in 0..x {
        for oy in 0..y {
            let grow = &grad.data()[(ox * y + oy) * cout..(ox * y + oy + 1) * cout];
            for co in 0..cout {
                dbias[co] += grow[co];
            }
            for dx in 0..k {
                let ix = ox as isize + dx as isize - pad as isize;
                if ix < 0 || ix >= x as isize {
                    continue;
                }
                for dy in 0..k {
                    let iy = oy as isize + dy as isize - pad as isize;
                    if iy < 0 || iy >= y as isize {
                        continue;
                    }
                    let ibase = (ix as usize * y + iy as usize) * cin;
                    let kbase = (dx * k + dy) * cin * cout;
                    for ci in 0..cin {
                        let iv = input.data()[ibase + ci];
                        let krow = &kernel.data()[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut din = 0.0;
                        let dkrow = &mut dkernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for co in 0..cout {
                            let g = grow[co];
                            dkrow[co] += iv * g;
                            din += krow[co] * g;
                        }
                        dinput[ibase + ci] += din;
                    }
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dinput).unwrap(),
        Tensor::new(kernel.shape().to_vec(), dkernel).unwrap(),
        Tensor::new(vec![cout], dbias).unwrap(),
    )
}

fn cost_volume_forward(a: &Tensor, b: &Tensor, q: usize) -> Tensor {
    let (x, y, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let half = (q / 2) as isize;
    let mut out = vec![0.0; x * y * q * q];
    for i in 0..x {
        for j in 0..y {
            let abase = (i * y + j) * c;
            for m in -half..half {
                let ni = i as isize + m;
                for n in -half..half {
                    let nj = j as isize + n;
                    let o = ((m + half) as usize) * q + (n + half) as usize;
                    if ni < 0 || ni >= x as isize || nj < 0 || nj >= y as isize {
                        continue;
                    }
                    let bbase = (ni as usize * y + nj as usize) * c;
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += a.data()[abase + ch] * b.data()[bbase + ch];
                    }
                    out[(i * y + j) * q * q + o] = dot;
                }
            }
        }
    }
    Tensor::new(vec![x, y, q * q], out).unwrap()
}

fn cost_volume_backward(a: &Tensor, b: &Tensor, grad: &Tensor, q: usize) -> (Tensor, Tensor) {
    let (x, y, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let half = (q / 2) as isize;
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    for i in 0..x {
        for j in 0..y {
            let abase = (i * y + j) * c;
            for m in -half..half {
                let ni = i as isize + m;
                for n in -half..half {
                    let nj = j as isize + n;
                    if ni < 0 || ni >= x as isize || nj < 0 || nj >= y as isize {
                        continue;
                    }
                    let o = ((m + half) as usize) * q + (n + half) as usize;
                    let g = grad.data()[(i * y + j) * q * q + o];
                    if g == 0.0 {
                        continue;
                    }
                    let bbase = (ni as usize * y + nj as usize) * c;
                    for ch in 0..c {
                        da[abase + ch] += g * b.data()[bbase + ch];
                        db[bbase + ch] += g * a.data()[abase + ch];
                    }
                }
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(b.shape().to_vec(), db).unwrap(),
    )
}

/// Four-corner bilinear read with zero extension outside the grid.
pub fn bilinear_at(feature: &Tensor, sx: f64, sy: f64, out: &mut [f64]) {
    let (x, y, c) = (
        feature.shape()[0] as isize,
        feature.shape()[1] as isize,
        feature.shape()[2],
    );
    out.fill(0.0);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let x0 = x0 as isize;
    let y0 = y0 as isize;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (cx, cy, w) in corners {
        // Skipping zero-weight corners keeps integer-position reads exact.
        if w == 0.0 || cx < 0 || cx >= x || cy < 0 || cy >= y {
            continue;
        }
        let base = (cx as usize * y as usize + cy as usize) * c;
        for ch in 0..c {
            out[ch] += w * feature.data()[base + ch];
        }
    }
}

fn warp_forward(feature: &Tensor, flow: &Tensor) -> Tensor {
    let (x, y, c) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let mut out = vec![0.0; x * y * c];
    for i in 0..x {
        for j in 0..y {
            let fbase = (i * y + j) * 2;
            let sx = i as f64 + flow.data()[fbase];
            let sy = j as f64 + flow.data()[fbase + 1];
            bilinear_at(feature, sx, sy, &mut out[(i * y + j) * c..(i * y + j + 1) * c]);
        }
    }
    Tensor::new(vec![x, y, c], out).unwrap()
}

fn warp_backward(feature: &Tensor, flow: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (x, y, c) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let (xi, yi) = (x as isize, y as isize);
    let mut df = vec![0.0; feature.numel()];
    let mut dw = vec![0.0; flow.numel()];
    for i in 0..x {
        for j in 0..y {
            let fbase = (i * y + j) * 2;
            let sx = i as f64 + flow.data()[fbase];
            let sy = j as f64 + flow.data()[fbase + 1];
            let x0f = sx.floor();
            let y0f = sy.floor();
            let fx = sx - x0f;
            let fy = sy - y0f;
            let x0 = x0f as isize;
            let y0 = y0f as isize;
            let g = &grad.data()[(i * y + j) * c..(i * y + j + 1) * c];

            // (corner dx, corner dy, weight, d weight / d sx, d weight / d sy)
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
                (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
                (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
                (x0 + 1, y0 + 1, fx * fy, fy, fx),
            ];
            let mut dsx = 0.0;
            let mut dsy = 0.0;
            for (cx, cy, w, wx, wy) in corners {
                if cx < 0 || cx >= xi || cy < 0 || cy >= yi {
                    continue;
                }
                let base = (cx as usize * y + cy as usize) * c;
                for ch in 0..c {
                    let gc = g[ch];
                    df[base + ch] += w * gc;
                    let fv = feature.data()[base + ch];
                    dsx += gc * wx * fv;
                    dsy += gc * wy * fv;
                }
            }
            dw[fbase] += dsx;
            dw[fbase + 1] += dsy;
        }
    }
    (
        Tensor::new(feature.shape().to_vec(), df).unwrap(),
        Tensor::new(flow.shape().to_vec(), dw).unwrap(),
    )
}
