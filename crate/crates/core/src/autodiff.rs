//! Tape-style reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every node stores its forward
//! value, the ids of its inputs (which always precede it) and whatever extra
//! context its backward rule needs. The graph is rebuilt for every forward
//! pass, so variable-size inputs simply produce differently shaped tapes.
//!
//! ```
//! use san_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![3.0]).unwrap());
//! let sq = g.pow(x, 2.0).unwrap();
//! let loss = g.reduce_sum(sq, 0).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle of a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives understood by [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Elementwise sum of equal shapes, or `a + b` with `b.shape == a.shape[1..]`
    /// broadcast over the leading dimension (bias add).
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    /// Sum along one axis, which is removed from the shape.
    ReduceSum {
        axis: usize,
    },
    /// Maximum along one axis; gradient goes to the first maximizing index.
    ReduceMax {
        axis: usize,
    },
    Pow(f64),
    Exp,
    Log,
    Scale(f64),
    /// Transpose of a rank-2 tensor.
    Transpose,
    Reshape(Vec<usize>),
    /// `[n, a] ++ [n, b] -> [n, a + b]`.
    ConcatCols,
    /// Valid (unpadded) stride-1 convolution: inputs `[H, W, Cin]`,
    /// kernel `[kh, kw, Cin, Cout]`, bias `[Cout]`.
    Conv2d,
    /// Non-overlapping 2x2 max pooling over `[H, W, C]`, flooring odd sizes.
    MaxPool2d,
    /// Mean softmax cross-entropy of `[B, N]` (or `[N]`) logits against
    /// `labels.len() == B` class indices. Produces a `[1]` scalar.
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::ReduceSum { .. } => "reduce_sum",
            Primitive::ReduceMax { .. } => "reduce_max",
            Primitive::Pow(_) => "pow",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Scale(_) => "scale",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::ConcatCols => "concat_cols",
            Primitive::Conv2d => "conv2d",
            Primitive::MaxPool2d => "max_pool2d",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Mul | Primitive::ConcatCols => 2,
            Primitive::Conv2d => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    /// Flat input index selected for each output element.
    Argmax(Vec<usize>),
    /// Row-wise softmax probabilities.
    Probs(Vec<f64>),
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf,
    Op(Primitive),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    kind: NodeKind,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    saved: Saved,
}

/// Append-only differentiation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Registers a trainable leaf; it receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> NodeId {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            kind: NodeKind::Leaf,
            inputs: Vec::new(),
            requires_grad,
            saved: Saved::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient written by the last [`Graph::backward`] call, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Smallest `|x|` over every value fed into a ReLU on this tape.
    ///
    /// Gradient checks use this to reject points that sit too close to a kink.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Op(Primitive::Relu)))
            .flat_map(|n| self.nodes[n.inputs[0].0].value.data().iter())
            .map(|v| v.abs())
            .reduce(f64::min)
    }

    /// Evaluates `prim` on `inputs` and appends the result to the tape.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != prim.arity() {
            return Err(Error::contract(format!(
                "{} expects {} inputs, got {}",
                prim.name(),
                prim.arity(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::contract(format!("unknown node id {}", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let (value, saved) = forward(&prim, &values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: prim.name() });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            value,
            kind: NodeKind::Op(prim),
            inputs: inputs.to_vec(),
            requires_grad,
            saved,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn reduce_sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Primitive::ReduceSum { axis }, &[a])
    }

    pub fn reduce_max(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Primitive::ReduceMax { axis }, &[a])
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.apply(Primitive::Pow(p), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::Reshape(shape), &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ConcatCols, &[a, b])
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Conv2d, &[input, kernel, bias])
    }

    pub fn max_pool2d(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MaxPool2d, &[a])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxCrossEntropy { labels }, &[logits])
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Every gradient slot on the tape is reset before the new gradients are
    /// written, so calling this twice yields the same gradients rather than
    /// accumulating them. Parameters not reachable from `loss` get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(format!("unknown node id {}", loss.0)));
        }
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let NodeKind::Op(prim) = &node.kind {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let input_grads = backward_rule(prim, &inputs, &node.value, &node.saved, &upstream);
                for (id, g) in node.inputs.iter().zip(input_grads) {
                    if !self.nodes[id.0].requires_grad {
                        continue;
                    }
                    match &mut grads[id.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(upstream);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            node.value.set_grad(Some(g));
        }
        Ok(())
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank_err(op: &'static str, a: &Tensor, expected: usize) -> Error {
    Error::contract(format!(
        "{op} expects a rank-{expected} tensor, got shape {:?}",
        a.shape()
    ))
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
}

/// Output shape and `(outer, axis_len, inner)` strides for a reduction.
fn reduce_layout(a: &Tensor, axis: usize, op: &'static str) -> Result<(Vec<usize>, usize, usize, usize)> {
    let shape = a.shape();
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    Ok((out_shape, outer, shape[axis], inner))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let op = prim.name();
    let out = match prim {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(dim_err(op, a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        Primitive::Add => {
            let (a, b) = (x[0], x[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else if a.rank() >= 2 && &a.shape()[1..] == b.shape() {
                let inner = b.numel();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data()[i % inner])
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else {
                return Err(dim_err(op, a, b));
            }
        }
        Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() {
                return Err(dim_err(op, a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Primitive::Relu => map_unary(x[0], |v| v.max(0.0)),
        Primitive::Tanh => map_unary(x[0], f64::tanh),
        Primitive::Sigmoid => map_unary(x[0], sigmoid),
        Primitive::ReduceSum { axis } => {
            let a = x[0];
            let (shape, outer, len, inner) = reduce_layout(a, *axis, op)?;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += a.data()[base + i];
                    }
                }
            }
            Tensor::from_parts(shape, out)
        }
        Primitive::ReduceMax { axis } => {
            let a = x[0];
            let (shape, outer, len, inner) = reduce_layout(a, *axis, op)?;
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        let v = a.data()[base + i];
                        // strict comparison keeps the first maximizer on ties
                        if v > out[o * inner + i] {
                            out[o * inner + i] = v;
                            arg[o * inner + i] = base + i;
                        }
                    }
                }
            }
            return Ok((Tensor::from_parts(shape, out), Saved::Argmax(arg)));
        }
        Primitive::Pow(p) => {
            let p = *p;
            let a = x[0];
            if !p.is_finite() {
                return Err(Error::Domain {
                    op,
                    detail: format!("exponent {p} is not finite"),
                });
            }
            let integral = p.fract() == 0.0;
            if let Some(bad) = a
                .data()
                .iter()
                .find(|&&v| (v < 0.0 && !integral) || (v == 0.0 && p < 1.0))
            {
                return Err(Error::Domain {
                    op,
                    detail: format!("base {bad} with exponent {p}"),
                });
            }
            map_unary(a, |v| v.powf(p))
        }
        Primitive::Exp => map_unary(x[0], f64::exp),
        Primitive::Log => {
            let a = x[0];
            if let Some(bad) = a.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op,
                    detail: format!("log of non-positive value {bad}"),
                });
            }
            map_unary(a, f64::ln)
        }
        Primitive::Scale(c) => map_unary(x[0], |v| v * c),
        Primitive::Transpose => {
            let a = x[0];
            if a.rank() != 2 {
                return Err(rank_err(op, a, 2));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c))
        }
        Primitive::Reshape(shape) => {
            let a = x[0];
            if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != a.numel() {
                return Err(Error::Dimension {
                    op,
                    left: a.shape().to_vec(),
                    right: shape.clone(),
                });
            }
            Tensor::from_parts(shape.clone(), a.data().to_vec())
        }
        Primitive::ConcatCols => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
                return Err(dim_err(op, a, b));
            }
            let (n, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut data = Vec::with_capacity(n * (ca + cb));
            for r in 0..n {
                data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
            }
            Tensor::from_parts(vec![n, ca + cb], data)
        }
        Primitive::Conv2d => return conv2d_forward(x[0], x[1], x[2]).map(|t| (t, Saved::None)),
        Primitive::MaxPool2d => return max_pool2d_forward(x[0]),
        Primitive::SoftmaxCrossEntropy { labels } => return softmax_ce_forward(x[0], labels),
    };
    Ok((out, Saved::None))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct ConvDims {
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<ConvDims> {
    let op = "conv2d";
    if input.rank() != 3 {
        return Err(rank_err(op, input, 3));
    }
    if kernel.rank() != 4 || kernel.shape()[2] != input.shape()[2] {
        return Err(dim_err(op, input, kernel));
    }
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    if bias.shape() != [cout] {
        return Err(dim_err(op, kernel, bias));
    }
    if kh > h || kw > w {
        return Err(dim_err(op, input, kernel));
    }
    Ok(ConvDims {
        w,
        cin,
        kh,
        kw,
        cout,
        oh: h - kh + 1,
        ow: w - kw + 1,
    })
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = conv_dims(input, kernel, bias)?;
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; d.oh * d.ow * d.cout];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let o = &mut out[(oy * d.ow + ox) * d.cout..(oy * d.ow + ox + 1) * d.cout];
            o.copy_from_slice(bias.data());
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let xbase = ((oy + ky) * d.w + (ox + kx)) * d.cin;
                    for ci in 0..d.cin {
                        let xv = x[xbase + ci];
                        let kbase = ((ky * d.kw + kx) * d.cin + ci) * d.cout;
                        for (ov, kv) in o.iter_mut().zip(&k[kbase..kbase + d.cout]) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.oh, d.ow, d.cout], out))
}

fn conv2d_backward(input: &Tensor, kernel: &Tensor, bias: &Tensor, up: &[f64]) -> Vec<Vec<f64>> {
    let d = conv_dims(input, kernel, bias).expect("shapes validated in forward");
    let (x, k) = (input.data(), kernel.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; d.cout];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let g = &up[(oy * d.ow + ox) * d.cout..(oy * d.ow + ox + 1) * d.cout];
            db.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let xbase = ((oy + ky) * d.w + (ox + kx)) * d.cin;
                    for ci in 0..d.cin {
                        let kbase = ((ky * d.kw + kx) * d.cin + ci) * d.cout;
                        let xv = x[xbase + ci];
                        let mut acc = 0.0;
                        for co in 0..d.cout {
                            dk[kbase + co] += xv * g[co];
                            acc += k[kbase + co] * g[co];
                        }
                        dx[xbase + ci] += acc;
                    }
                }
            }
        }
    }
    vec![dx, dk, db]
}

fn max_pool2d_forward(a: &Tensor) -> Result<(Tensor, Saved)> {
    if a.rank() != 3 {
        return Err(rank_err("max_pool2d", a, 3));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < 2 || w < 2 {
        return Err(Error::contract(format!(
            "max_pool2d needs spatial size of at least 2x2, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let base = ((2 * oy + dy) * w + (2 * ox + dx)) * c;
                for ch in 0..c {
                    let o = (oy * ow + ox) * c + ch;
                    let v = a.data()[base + ch];
                    if v > out[o] {
                        out[o] = v;
                        arg[o] = base + ch;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![oh, ow, c], out), Saved::Argmax(arg)))
}

fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Saved)> {
    let (rows, classes) = match logits.shape() {
        [n] => (1, *n),
        [b, n] => (*b, *n),
        _ => return Err(rank_err("softmax_cross_entropy", logits, 2)),
    };
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = Vec::with_capacity(logits.numel());
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let z = &logits.data()[r * classes..(r + 1) * classes];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - z[label];
        probs.extend(z.iter().map(|v| (v - lse).exp()));
    }
    loss /= rows as f64;
    Ok((Tensor::from_parts(vec![1], vec![loss]), Saved::Probs(probs)))
}

fn scatter_argmax(len: usize, arg: &[usize], up: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; len];
    for (&i, &u) in arg.iter().zip(up) {
        g[i] += u;
    }
    g
}

fn backward_rule(prim: &Primitive, x: &[&Tensor], out: &Tensor, saved: &Saved, up: &[f64]) -> Vec<Vec<f64>> {
    match prim {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let bt = transpose_raw(b.data(), k, n);
            let at = transpose_raw(a.data(), m, k);
            vec![matmul_raw(up, &bt, m, n, k), matmul_raw(&at, up, k, m, n)]
        }
        Primitive::Add => {
            let b = x[1];
            let db = if x[0].shape() == b.shape() {
                up.to_vec()
            } else {
                let inner = b.numel();
                let mut db = vec![0.0; inner];
                for (i, u) in up.iter().enumerate() {
                    db[i % inner] += u;
                }
                db
            };
            vec![up.to_vec(), db]
        }
        Primitive::Mul => {
            let (a, b) = (x[0].data(), x[1].data());
            vec![
                up.iter().zip(b).map(|(u, v)| u * v).collect(),
                up.iter().zip(a).map(|(u, v)| u * v).collect(),
            ]
        }
        Primitive::Relu => vec![x[0]
            .data()
            .iter()
            .zip(up)
            .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
            .collect()],
        Primitive::Tanh => vec![out.data().iter().zip(up).map(|(y, u)| u * (1.0 - y * y)).collect()],
        Primitive::Sigmoid => vec![out.data().iter().zip(up).map(|(y, u)| u * y * (1.0 - y)).collect()],
        Primitive::ReduceSum { axis } => {
            let a = x[0];
            let (_, outer, len, inner) = reduce_layout(a, *axis, "reduce_sum").expect("validated");
            let mut g = vec![0.0; a.numel()];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    g[base..base + inner].copy_from_slice(&up[o * inner..(o + 1) * inner]);
                }
            }
            vec![g]
        }
        Primitive::ReduceMax { .. } | Primitive::MaxPool2d => {
            let Saved::Argmax(arg) = saved else {
                unreachable!("argmax context missing")
            };
            vec![scatter_argmax(x[0].numel(), arg, up)]
        }
        Primitive::Pow(p) => vec![x[0]
            .data()
            .iter()
            .zip(up)
            .map(|(v, u)| u * p * v.powf(p - 1.0))
            .collect()],
        Primitive::Exp => vec![out.data().iter().zip(up).map(|(y, u)| u * y).collect()],
        Primitive::Log => vec![x[0].data().iter().zip(up).map(|(v, u)| u / v).collect()],
        Primitive::Scale(c) => vec![up.iter().map(|u| u * c).collect()],
        Primitive::Transpose => {
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            vec![transpose_raw(up, c, r)]
        }
        Primitive::Reshape(_) => vec![up.to_vec()],
        Primitive::ConcatCols => {
            let (n, ca, cb) = (x[0].shape()[0], x[0].shape()[1], x[1].shape()[1]);
            let mut ga = Vec::with_capacity(n * ca);
            let mut gb = Vec::with_capacity(n * cb);
            for row in up.chunks(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            vec![ga, gb]
        }
        Primitive::Conv2d => conv2d_backward(x[0], x[1], x[2], up),
        Primitive::SoftmaxCrossEntropy { labels } => {
            let Saved::Probs(probs) = saved else {
                unreachable!("softmax context missing")
            };
            let rows = labels.len();
            let classes = probs.len() / rows;
            let scale = up[0] / rows as f64;
            let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &label) in labels.iter().enumerate() {
                g[r * classes + label] -= scale;
            }
            vec![g]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_forward() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn reduce_sum_columns() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let s = g.reduce_sum(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 7.0]);
        let r = g.reduce_sum(a, 1).unwrap();
        assert_eq!(g.value(r).data(), &[6.0, 5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 1], &[0.0; 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn log_domain_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn fractional_pow_of_negative_is_domain_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[-2.0]));
        assert!(matches!(g.pow(a, 0.5), Err(Error::Domain { .. })));
        assert!(g.pow(a, 2.0).is_ok());
    }

    #[test]
    fn exp_overflow_is_non_finite_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn relu_backward_subgradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 2.0, 0.0]));
        let y = g.relu(x).unwrap();
        let l = g.reduce_sum(y, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn square_backward() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.pow(x, 2.0).unwrap();
        let l = g.reduce_sum(y, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.param(t(&[2], &[0.0, 0.0]));
        let l = g.softmax_cross_entropy(z, vec![0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let y = g.pow(x, 2.0).unwrap();
        let l = g.reduce_sum(y, 0).unwrap();
        g.backward(l).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), first.as_slice());
    }

    #[test]
    fn shared_input_accumulates_within_one_pass() {
        // l = sum(x * x) reaches x through both inputs of mul
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -2.0]));
        let y = g.mul(x, x).unwrap();
        let l = g.reduce_sum(y, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1.0]));
        let unused = g.param(t(&[2], &[1.0, 1.0]));
        let l = g.reduce_sum(x, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(t(&[1], &[2.0]));
        let x = g.param(t(&[1], &[3.0]));
        let y = g.mul(c, x).unwrap();
        let l = g.reduce_sum(y, 0).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn bias_add_broadcasts_over_leading_dim() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.param(t(&[2], &[10.0, 20.0]));
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let l = g.reduce_sum(y, 0).unwrap();
        let l = g.reduce_sum(l, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn reduce_max_routes_to_first_maximizer() {
        let mut g = Graph::new();
        let a = g.param(t(&[3, 1], &[2.0, 5.0, 5.0]));
        let m = g.reduce_max(a, 0).unwrap();
        assert_eq!(g.value(m).data(), &[5.0]);
        g.backward(m).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_pool_floors_odd_sizes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..9).map(f64::from).collect();
        let a = g.constant(t(&[3, 3, 1], &data));
        let p = g.max_pool2d(a).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1, 1]);
        assert_eq!(g.value(p).data(), &[4.0]);
    }

    #[test]
    fn conv_with_unit_kernel_copies_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let x = g.constant(t(&[2, 3, 1], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(x, k, b).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| v + 0.5).collect();
        assert_eq!(g.value(y).data(), expected.as_slice());
    }

    #[test]
    fn min_abs_relu_input_reports_closest_kink() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-0.5, 0.01, 3.0]));
        assert!(g.min_abs_relu_input().is_none());
        g.relu(x).unwrap();
        assert_eq!(g.min_abs_relu_input(), Some(0.01));
    }

    #[test]
    fn apply_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.constant(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
            let b = g.constant(t(&[2, 2], &[1.1, -0.7, 0.3, 2.9]));
            let c = g.matmul(a, b).unwrap();
            let s = g.reduce_sum(c, 0).unwrap();
            g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(build(), build());
    }
}
