use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeometry};
use super::{spatial_dims, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Exp,
    Log,
    Sqrt,
    Neg,
}

/// How the right operand of a binary op is expanded to the left shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// `b` has one value per channel of a `[B, C, ..]` operand.
    Channel {
        channels: usize,
        inner: usize,
    },
}

impl Broadcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Channel { channels, inner } => (i / inner) % channels,
        }
    }

    fn reduce(self, full: &[f64], b_len: usize) -> Vec<f64> {
        match self {
            Broadcast::Same => full.to_vec(),
            _ => {
                let mut out = vec![0.0; b_len];
                for (i, v) in full.iter().enumerate() {
                    out[self.index(i)] += v;
                }
                out
            }
        }
    }
}

/// Stride, dilation and symmetric zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        dilation: 1,
        padding: 0,
    };

    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        a: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    AvgPool {
        a: NodeId,
        planes: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    Resize {
        a: NodeId,
        planes: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    L2Norm {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    Transpose {
        a: NodeId,
        rows: usize,
        cols: usize,
    },
    Narrow {
        a: NodeId,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Inverse2x2 {
        a: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Rc<Vec<f64>>,
        targets: Rc<Vec<usize>>,
        channels: usize,
        inner: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation.
///
/// Nodes are appended in execution order, so every operation's inputs
/// precede it and a reverse scan is a valid topological traversal.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable input.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// Registers an input that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Constant, false)
    }

    fn push(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[NodeId]) -> Var<'_> {
        let requires_grad = self.requires(inputs);
        let value = Tensor::new(shape, data).expect("op produced inconsistent tensor");
        self.push(Rc::new(value), op, requires_grad)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::contract(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut lens = Vec::with_capacity(parts.len());
        let mut values = Vec::with_capacity(parts.len());
        for p in parts {
            assert!(std::ptr::eq(p.graph, self), "var from another graph");
            let v = p.value();
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(TensorError::shape("concat", &base, s));
            }
            lens.push(s[axis]);
            values.push(v);
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(self.record(
            shape,
            data,
            Op::Concat {
                parts: ids.clone(),
                outer,
                inner,
                lens,
            },
            &ids,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        assert!(std::ptr::eq(loss.graph, self), "var from another graph");
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            for (input, contribution) in backward_rule(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn backward_rule(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
    let val = |id: NodeId| -> &Tensor { &nodes[id].value };
    let needs = |id: NodeId| nodes[id].requires_grad;
    let out = node.value.data();
    match &node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::Binary { kind, a, b, bcast } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let b_len = bv.len();
            let mut res = Vec::new();
            match kind {
                BinaryKind::Add => {
                    res.push((*a, g.to_vec()));
                    if needs(*b) {
                        res.push((*b, bcast.reduce(g, b_len)));
                    }
                }
                BinaryKind::Sub => {
                    res.push((*a, g.to_vec()));
                    if needs(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        res.push((*b, bcast.reduce(&neg, b_len)));
                    }
                }
                BinaryKind::Mul => {
                    if needs(*a) {
                        res.push((
                            *a,
                            g.iter().enumerate().map(|(i, gi)| gi * bv[bcast.index(i)]).collect(),
                        ));
                    }
                    if needs(*b) {
                        let full: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                        res.push((*b, bcast.reduce(&full, b_len)));
                    }
                }
                BinaryKind::Div => {
                    if needs(*a) {
                        res.push((
                            *a,
                            g.iter().enumerate().map(|(i, gi)| gi / bv[bcast.index(i)]).collect(),
                        ));
                    }
                    if needs(*b) {
                        let full: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| {
                                let bi = bv[bcast.index(i)];
                                -gi * av[i] / (bi * bi)
                            })
                            .collect();
                        res.push((*b, bcast.reduce(&full, b_len)));
                    }
                }
            }
            res
        }
        Op::Unary { kind, a } => {
            let av = val(*a).data();
            let grad: Vec<f64> = match kind {
                UnaryKind::Relu => g
                    .iter()
                    .zip(av)
                    .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                    .collect(),
                UnaryKind::Exp => g.iter().zip(out).map(|(gi, y)| gi * y).collect(),
                UnaryKind::Log => g.iter().zip(av).map(|(gi, x)| gi / x).collect(),
                UnaryKind::Sqrt => g.iter().zip(out).map(|(gi, y)| gi * 0.5 / y).collect(),
                UnaryKind::Neg => g.iter().map(|gi| -gi).collect(),
            };
            vec![(*a, grad)]
        }
        Op::Scale { a, factor } => vec![(*a, g.iter().map(|v| v * factor).collect())],
        Op::MatMul { a, b, m, k, n } => {
            let mut res = Vec::new();
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(*m, *n, *k, g, false, val(*b).data(), true, &mut ga, 0.0);
                res.push((*a, ga));
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(*k, *m, *n, val(*a).data(), true, g, false, &mut gb, 0.0);
                res.push((*b, gb));
            }
            res
        }
        Op::Conv { x, w, bias, geom } => {
            let need_b = bias.map(needs).unwrap_or(false);
            let (gx, gw, gb) =
                kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g, needs(*x), needs(*w), need_b);
            let mut res = Vec::new();
            if let Some(gx) = gx {
                res.push((*x, gx));
            }
            if let Some(gw) = gw {
                res.push((*w, gw));
            }
            if let (Some(b), Some(gb)) = (bias, gb) {
                res.push((*b, gb));
            }
            res
        }
        Op::AvgPool { a, planes, h, w, k } => {
            vec![(*a, kernels::avg_pool2d_backward(g, *planes, *h, *w, *k))]
        }
        Op::Softmax { a, axis } => {
            vec![(*a, kernels::softmax_backward(out, g, node.value.shape(), *axis))]
        }
        Op::Resize {
            a,
            planes,
            h,
            w,
            oh,
            ow,
        } => {
            vec![(*a, kernels::resize_bilinear_backward(g, *planes, *h, *w, *oh, *ow))]
        }
        Op::Sum { a } => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::Mean { a } => {
            let n = val(*a).numel();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::L2Norm { a } => {
            let norm = out[0];
            let av = val(*a).data();
            if norm == 0.0 {
                vec![(*a, vec![0.0; av.len()])]
            } else {
                vec![(*a, av.iter().map(|x| g[0] * x / norm).collect())]
            }
        }
        Op::Reshape { a } => vec![(*a, g.to_vec())],
        Op::Transpose { a, rows, cols } => {
            // Output is cols x rows; map back to rows x cols.
            let mut ga = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    ga[r * cols + c] = g[c * rows + r];
                }
            }
            vec![(*a, ga)]
        }
        Op::Narrow {
            a,
            outer,
            axis_len,
            inner,
            start,
            len,
        } => {
            let mut ga = vec![0.0; outer * axis_len * inner];
            for o in 0..*outer {
                let dst = (o * axis_len + start) * inner;
                let src = o * len * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(*a, ga)]
        }
        Op::Concat {
            parts,
            outer,
            inner,
            lens,
        } => {
            let total: usize = lens.iter().sum();
            let mut res: Vec<(NodeId, Vec<f64>)> = parts
                .iter()
                .zip(lens)
                .map(|(&p, &len)| (p, Vec::with_capacity(outer * len * inner)))
                .collect();
            for o in 0..*outer {
                let mut offset = o * total * inner;
                for (slot, &len) in res.iter_mut().zip(lens) {
                    slot.1.extend_from_slice(&g[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            res
        }
        Op::Inverse2x2 { a } => {
            // d(A^-1) = -A^-1 dA A^-1, so grad_A = -Y^T G Y^T with Y = A^-1.
            let y = out;
            let yt = [y[0], y[2], y[1], y[3]];
            let mul = |p: &[f64], q: &[f64]| {
                [
                    p[0] * q[0] + p[1] * q[2],
                    p[0] * q[1] + p[1] * q[3],
                    p[2] * q[0] + p[3] * q[2],
                    p[2] * q[1] + p[3] * q[3],
                ]
            };
            let t = mul(&yt, g);
            let r = mul(&t, &yt);
            vec![(*a, r.iter().map(|v| -v).collect())]
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            channels,
            inner,
        } => {
            let count = targets.len() as f64;
            let scale = g[0] / count;
            let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (pos, &t) in targets.iter().enumerate() {
                let (o, i) = (pos / inner, pos % inner);
                gl[(o * channels + t) * inner + i] -= scale;
            }
            vec![(*logits, gl)]
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    /// Copy of this value that blocks gradient flow.
    pub fn detach(self) -> Var<'g> {
        self.graph.push(self.value(), Op::Constant, false)
    }

    fn binary(self, rhs: Var<'g>, kind: BinaryKind, name: &'static str) -> Result<Var<'g>, TensorError> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let bcast = if a.shape() == b.shape() {
            Broadcast::Same
        } else if b.numel() == 1 {
            Broadcast::Scalar
        } else if a.shape().len() >= 2 && b.shape() == [a.shape()[1]] {
            Broadcast::Channel {
                channels: a.shape()[1],
                inner: a.shape()[2..].iter().product(),
            }
        } else {
            return Err(TensorError::shape(name, a.shape(), b.shape()));
        };
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let y = bd[bcast.index(i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        Ok(self.graph.record(
            a.shape().to_vec(),
            data,
            Op::Binary {
                kind,
                a: self.id,
                b: rhs.id,
                bcast,
            },
            &[self.id, rhs.id],
        ))
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(rhs, BinaryKind::Add, "add")
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(rhs, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(rhs, BinaryKind::Mul, "mul")
    }

    pub fn div(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(rhs, BinaryKind::Div, "div")
    }

    fn unary(self, kind: UnaryKind) -> Var<'g> {
        let a = self.value();
        let data = a
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Neg => -x,
            })
            .collect();
        self.graph
            .record(a.shape().to_vec(), data, Op::Unary { kind, a: self.id }, &[self.id])
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(UnaryKind::Relu)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(self) -> Var<'g> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * factor).collect();
        self.graph
            .record(a.shape().to_vec(), data, Op::Scale { a: self.id, factor }, &[self.id])
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self).expect("same shape")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut data, 0.0);
        Ok(self.graph.record(
            vec![m, n],
            data,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            &[self.id, rhs.id],
        ))
    }

    /// Cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, spec: ConvSpec) -> Result<Var<'g>, TensorError> {
        self.same_graph(&weight);
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::shape("conv2d", sx, sw));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
        };
        let ho = ConvGeometry::out_extent(geom.height, geom.kernel_h, spec.stride, spec.dilation, spec.padding);
        let wo = ConvGeometry::out_extent(geom.width, geom.kernel_w, spec.stride, spec.dilation, spec.padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(TensorError::shape("conv2d", sx, sw));
        };
        let bias_value = match bias {
            Some(b) => {
                self.same_graph(&b);
                let bv = b.value();
                if bv.shape() != [geom.out_channels] {
                    return Err(TensorError::shape("conv2d bias", sw, bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let data = kernels::conv2d_forward(&geom, x.data(), w.data(), bias_value.as_ref().map(|b| b.data()));
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        Ok(self.graph.record(
            vec![geom.batch, geom.out_channels, ho, wo],
            data,
            Op::Conv {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            &inputs,
        ))
    }

    /// Mean over non-overlapping `k x k` blocks of the two trailing axes.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let (planes, h, w) = spatial_dims("avg_pool2d", a.shape())?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::shape("avg_pool2d", a.shape(), &[k, k]));
        }
        let data = kernels::avg_pool2d(a.data(), planes, h, w, k);
        let mut shape = a.shape().to_vec();
        let n = shape.len();
        shape[n - 2] = h / k;
        shape[n - 1] = w / k;
        Ok(self.graph.record(
            shape,
            data,
            Op::AvgPool {
                a: self.id,
                planes,
                h,
                w,
                k,
            },
            &[self.id],
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        if axis >= a.shape().len() {
            return Err(TensorError::contract(
                "softmax",
                format!("axis {axis} invalid for {:?}", a.shape()),
            ));
        }
        let data = kernels::softmax(a.data(), a.shape(), axis);
        Ok(self
            .graph
            .record(a.shape().to_vec(), data, Op::Softmax { a: self.id, axis }, &[self.id]))
    }

    /// Align-corners-false bilinear resize of the two trailing axes.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let (planes, h, w) = spatial_dims("resize_bilinear", a.shape())?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::shape("resize_bilinear", a.shape(), &[oh, ow]));
        }
        let data = kernels::resize_bilinear(a.data(), planes, h, w, oh, ow);
        let mut shape = a.shape().to_vec();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        Ok(self.graph.record(
            shape,
            data,
            Op::Resize {
                a: self.id,
                planes,
                h,
                w,
                oh,
                ow,
            },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'g> {
        let total = self.value().data().iter().sum();
        self.graph
            .record(Vec::new(), vec![total], Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let a = self.value();
        let mean = a.data().iter().sum::<f64>() / a.numel() as f64;
        self.graph
            .record(Vec::new(), vec![mean], Op::Mean { a: self.id }, &[self.id])
    }

    /// Euclidean norm over all elements; the zero vector gets a zero gradient.
    pub fn l2_norm(self) -> Var<'g> {
        let norm = self.value().l2_norm();
        self.graph
            .record(Vec::new(), vec![norm], Op::L2Norm { a: self.id }, &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.numel() {
            return Err(TensorError::shape("reshape", a.shape(), shape));
        }
        Ok(self.graph.record(
            shape.to_vec(),
            a.data().to_vec(),
            Op::Reshape { a: self.id },
            &[self.id],
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let [rows, cols] = *a.shape() else {
            return Err(TensorError::contract(
                "transpose",
                format!("expected 2-D, got {:?}", a.shape()),
            ));
        };
        let ad = a.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = ad[r * cols + c];
            }
        }
        Ok(self.graph.record(
            vec![cols, rows],
            data,
            Op::Transpose { a: self.id, rows, cols },
            &[self.id],
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::shape("narrow", shape, &[axis, start, len]));
        }
        let (outer, axis_len, inner) = kernels::axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.graph.record(
            out_shape,
            data,
            Op::Narrow {
                a: self.id,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            &[self.id],
        ))
    }

    /// Closed-form inverse of a 2x2 matrix.
    pub fn inverse_2x2(self) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        if a.shape() != [2, 2] {
            return Err(TensorError::shape("inverse_2x2", a.shape(), &[2, 2]));
        }
        let m = a.data();
        let det = m[0] * m[3] - m[1] * m[2];
        if det == 0.0 || !det.is_finite() {
            return Err(TensorError::contract("inverse_2x2", format!("determinant {det}")));
        }
        let data = vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
        Ok(self
            .graph
            .record(vec![2, 2], data, Op::Inverse2x2 { a: self.id }, &[self.id]))
    }

    /// Mean cross-entropy of logits `[B, C, ..]` (classes on axis 1) against
    /// integer targets laid out as `[B, ..]`.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let shape = a.shape();
        if shape.len() < 2 {
            return Err(TensorError::contract("cross_entropy", format!("logits {shape:?}")));
        }
        let (outer, channels, inner) = kernels::axis_split(shape, 1);
        if targets.len() != outer * inner {
            return Err(TensorError::shape("cross_entropy", shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= channels) {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("target class {bad} out of range for {channels} channels"),
            ));
        }
        let probs = kernels::softmax(a.data(), shape, 1);
        let mut total = 0.0;
        for (pos, &t) in targets.iter().enumerate() {
            let (o, i) = (pos / inner, pos % inner);
            let base = o * channels * inner + i;
            let max = (0..channels)
                .map(|c| a.data()[base + c * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..channels)
                    .map(|c| (a.data()[base + c * inner] - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - a.data()[base + t * inner];
        }
        let loss = total / targets.len() as f64;
        Ok(self.graph.record(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                probs: Rc::new(probs),
                targets: Rc::new(targets.to_vec()),
                channels,
                inner,
            },
            &[self.id],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let r = g.constant(t(&[2], &[-1.0, 2.0])).relu();
        assert_eq!(r.value().data(), &[0.0, 2.0]);
        let c = g.constant(t(&[3], &[0.0; 3]));
        let err = a.add(c).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "add",
                lhs: vec![2],
                rhs: vec![3]
            }
        );
    }

    #[test]
    fn multiply_backward() {
        let g = Graph::new();
        let a = g.variable(Tensor::from_vec(vec![2.0]));
        let b = g.variable(Tensor::from_vec(vec![3.0]));
        let y = a.mul(b).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0]);
        assert_eq!(grads.get(b).unwrap(), &[2.0]);
    }

    #[test]
    fn matmul_values_and_errors() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = g.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(v).unwrap().value().data(), &[3.0, 7.0]);
        let i = g.constant(Tensor::eye(2));
        assert_eq!(i.matmul(a).unwrap().value().data(), a.value().data());
        assert!(v.matmul(v).is_err());
    }

    #[test]
    fn conv_counts_ones() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = x.conv2d(w, None, ConvSpec::POINTWISE).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 9.0));
        let big = g.constant(Tensor::full(&[1, 1, 7, 7], 1.0));
        assert!(x.conv2d(big, None, ConvSpec::POINTWISE).is_err());
    }

    #[test]
    fn pointwise_identity_conv() {
        let g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| i as f64 * 0.1).collect();
        let x = g.constant(t(&[2, 3, 4, 4], &data));
        let w = g.constant(Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap());
        let y = x.conv2d(w, None, ConvSpec::POINTWISE).unwrap();
        assert_eq!(y.value().data(), &data[..]);
    }

    #[test]
    fn softmax_is_stable() {
        let g = Graph::new();
        let s = g.constant(t(&[2], &[1000.0, 0.0])).softmax(0).unwrap();
        let v = s.value();
        assert_eq!(v.data()[0], 1.0);
        assert!(v.data()[1] >= 0.0 && v.data()[1] < 1e-300);
        let e = g.constant(t(&[2], &[3.5, 3.5])).softmax(0).unwrap();
        assert_eq!(e.value().data(), &[0.5, 0.5]);
        assert!(e.softmax(1).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[1, 1, 4, 4], &data));
        assert_eq!(x.resize_bilinear(4, 4).unwrap().value().data(), &data[..]);
        let c = g.constant(Tensor::full(&[1, 2, 3, 5], 0.25));
        let up = c.resize_bilinear(7, 2).unwrap();
        assert!(up.value().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn reductions() {
        let g = Graph::new();
        assert_eq!(g.constant(t(&[2], &[3.0, 4.0])).l2_norm().item(), 5.0);
        assert_eq!(g.constant(t(&[3], &[1.0, 2.0, 3.0])).mean().item(), 2.0);
        let p = g.variable(Tensor::full(&[2, 3], 0.7));
        let grads = g.backward(p.sum()).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[1.0; 6]);
        let z = g.variable(Tensor::zeros(&[3]));
        let n = z.l2_norm();
        assert_eq!(n.item(), 0.0);
        assert_eq!(g.backward(n).unwrap().get(z).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn unrelated_param_has_no_gradient() {
        let g = Graph::new();
        let p = g.variable(Tensor::full(&[4], 1.0));
        let q = g.variable(Tensor::full(&[2], 2.0));
        let grads = g.backward(q.sum()).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.tensor(p).data(), &[0.0; 4]);
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let p = g.variable(Tensor::full(&[2], 1.0));
        assert!(matches!(g.backward(p), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let p = g.variable(Tensor::from_vec(vec![2.0]));
        let y = p.mul(p.detach()).unwrap().sum();
        assert_eq!(g.backward(y).unwrap().get(p).unwrap(), &[2.0]);
    }

    #[test]
    fn channel_broadcast() {
        let g = Graph::new();
        let x = g.variable(Tensor::full(&[2, 3, 2, 2], 1.0));
        let b = g.variable(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = x.mul(b).unwrap();
        assert_eq!(y.value().data()[4], 2.0);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let g = Graph::new();
        let a = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[1, 1, 2], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![1, 3, 2]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.narrow(1, 2, 1).unwrap().value().data(), &[5.0, 6.0]);
        let bad = g.constant(t(&[1, 1, 3], &[0.0; 3]));
        assert!(g.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn inverse_matches_hand_value() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[4.0, 7.0, 2.0, 6.0]));
        let inv = a.inverse_2x2().unwrap();
        let expected = [0.6, -0.7, -0.2, 0.4];
        for (x, y) in inv.value().data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let g = Graph::new();
        let logits = g.variable(Tensor::zeros(&[1, 2, 2, 2]));
        let loss = logits.softmax_cross_entropy(&[0, 1, 1, 0]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(logits.softmax_cross_entropy(&[0, 2, 1, 0]).is_err());
    }
}
