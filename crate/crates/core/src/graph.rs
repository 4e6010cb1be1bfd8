//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once (model plus loss) and evaluated many times with
//! different [`Bindings`]. Nodes are appended in topological order, so the
//! forward pass is a single sweep and the backward pass visits every node
//! once in reverse. Buffers for intermediate values are kept between
//! evaluations and reused when shapes repeat.
//!
//! Leading (batch) extents are resolved at evaluation time, so one graph
//! serves full and ragged final batches alike.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Denominator floor for row L2 norms.
pub const NORM_FLOOR: f64 = 1e-12;

const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Constant(Tensor),
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Log,
    Exp,
    Sqrt,
    XLogX,
    Conv2d { pad: usize },
    AvgPool2,
    InstanceNorm,
    Flatten,
    Sum,
    Mean,
    SumRows,
    Softmax,
    LogSoftmax,
    RowNorm,
    RowDot,
    Dot,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::MatMul => "matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu => "relu",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Sqrt => "sqrt",
            Op::XLogX => "xlogx",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 => "avg_pool2",
            Op::InstanceNorm => "instance_norm",
            Op::Flatten => "flatten",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::RowNorm => "row_norm",
            Op::RowDot => "row_dot",
            Op::Dot => "dot",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    requires_grad: bool,
}

/// Named tensors fed to a graph evaluation: data inputs and parameters.
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, tensor: &'a Tensor) -> &mut Self {
        self.map.insert(name, tensor);
        self
    }

    pub fn with(mut self, name: &'a str, tensor: &'a Tensor) -> Self {
        self.map.insert(name, tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Result of one graph evaluation.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub outputs: BTreeMap<String, Tensor>,
    /// Gradient of the differentiated output with respect to every
    /// parameter node, keyed by parameter name. Empty for forward-only runs.
    pub param_grads: BTreeMap<String, Tensor>,
}

impl Evaluation {
    pub fn output(&self, name: &str) -> Result<&Tensor> {
        self.outputs
            .get(name)
            .ok_or_else(|| Error::UnknownOutput(name.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.output(name)?;
        t.item().ok_or_else(|| Error::NonScalarOutput {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
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

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let requires_grad = matches!(op, Op::Param(_))
            || inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            requires_grad,
        });
        self.values.push(Tensor::default());
        self.grads.push(Vec::new());
        NodeId(self.nodes.len() - 1)
    }

    fn find_named(&self, name: &str, param: bool) -> Option<NodeId> {
        self.nodes.iter().position(|n| match (&n.op, param) {
            (Op::Param(p), true) => p == name,
            (Op::Input(p), false) => p == name,
            _ => false,
        })
        .map(NodeId)
    }

    /// A data input bound by name at evaluation time. Not differentiated.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.find_named(name, false)
            .unwrap_or_else(|| self.push(Op::Input(name.to_string()), vec![]))
    }

    /// A trainable parameter bound by name at evaluation time.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.find_named(name, true)
            .unwrap_or_else(|| self.push(Op::Param(name.to_string()), vec![]))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value), vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    /// `[n, m] + [m]`, broadcasting over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias, vec![a, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(factor), vec![a])
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        self.push(Op::AddScalar(offset), vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, vec![a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt, vec![a])
    }

    /// Elementwise `x ln x`, with the `0 ln 0 = 0` convention.
    pub fn xlogx(&mut self, a: NodeId) -> NodeId {
        self.push(Op::XLogX, vec![a])
    }

    /// Stride-1 convolution. `x: [N, C, H, W]`, `weight: [O, C, kh, kw]`,
    /// `bias: [O]`.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, pad: usize) -> NodeId {
        self.push(Op::Conv2d { pad }, vec![x, weight, bias])
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::AvgPool2, vec![x])
    }

    /// Per-sample, per-channel normalization over spatial positions, no
    /// affine parameters.
    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::InstanceNorm, vec![x])
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, vec![x])
    }

    /// `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumRows, vec![x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSoftmax, vec![x])
    }

    /// Row L2 norms `[n, m] -> [n]`, floored at [`NORM_FLOOR`].
    pub fn row_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::RowNorm, vec![x])
    }

    /// Row-wise dot products `[n, m] x [n, m] -> [n]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::RowDot, vec![a, b])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot, vec![a, b])
    }

    /// Registers `node` as a named output.
    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), node));
    }

    /// Parameter names referenced by the graph, in declaration order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(p) => Some(p.as_str()),
                _ => None,
            })
            .collect()
    }

    fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownOutput(name.to_string()))
    }

    /// Forward pass only.
    pub fn evaluate(&mut self, bindings: &Bindings<'_>) -> Result<Evaluation> {
        let last = self.outputs.iter().map(|(_, id)| id.0).max();
        if let Some(last) = last {
            self.forward(bindings, last)?;
        }
        self.collect_outputs(bindings)
    }

    /// Forward pass followed by reverse-mode differentiation of the scalar
    /// output `wrt` with respect to every parameter.
    pub fn evaluate_with_grad(&mut self, bindings: &Bindings<'_>, wrt: &str) -> Result<Evaluation> {
        let target = self.output_id(wrt)?;
        let last = self
            .outputs
            .iter()
            .map(|(_, id)| id.0)
            .max()
            .unwrap_or(target.0);
        self.forward(bindings, last)?;
        let shape = self.resolve(bindings, target)?.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput {
                name: wrt.to_string(),
                shape,
            });
        }
        self.backward(bindings, target)?;
        let mut eval = self.collect_outputs(bindings)?;
        for (i, node) in self.nodes.iter().enumerate().take(target.0 + 1) {
            if let Op::Param(name) = &node.op {
                let value = bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                let grad = Tensor::new(value.shape().to_vec(), self.grads[i].clone())?;
                if !grad.is_finite() {
                    return Err(Error::NanGradient(name.clone()));
                }
                eval.param_grads.insert(name.clone(), grad);
            }
        }
        Ok(eval)
    }

    fn collect_outputs(&self, bindings: &Bindings<'_>) -> Result<Evaluation> {
        let mut outputs = BTreeMap::new();
        for (name, id) in &self.outputs {
            let t = self.resolve(bindings, *id)?;
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("output `{name}`")));
            }
            outputs.insert(name.clone(), t.clone());
        }
        Ok(Evaluation {
            outputs,
            param_grads: BTreeMap::new(),
        })
    }

    fn resolve<'s>(&'s self, bindings: &Bindings<'s>, id: NodeId) -> Result<&'s Tensor> {
        Self::resolve_in(&self.nodes, &self.values, bindings, id)
    }

    fn resolve_in<'s>(
        nodes: &'s [Node],
        values: &'s [Tensor],
        bindings: &Bindings<'s>,
        id: NodeId,
    ) -> Result<&'s Tensor> {
        match &nodes[id.0].op {
            Op::Input(name) | Op::Param(name) => {
                bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))
            }
            Op::Constant(t) => Ok(t),
            _ => Ok(&values[id.0]),
        }
    }

    fn forward(&mut self, bindings: &Bindings<'_>, last: usize) -> Result<()> {
        for i in 0..=last {
            let node = &self.nodes[i];
            match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    if bindings.get(name).is_none() {
                        return Err(Error::Unbound(name.clone()));
                    }
                    continue;
                }
                Op::Constant(_) => continue,
                _ => {}
            }
            let (before, rest) = self.values.split_at_mut(i);
            let mut ins = Vec::with_capacity(node.inputs.len());
            for &j in &node.inputs {
                ins.push(Self::resolve_in(&self.nodes, before, bindings, j)?);
            }
            forward_op(&node.op, &ins, &mut rest[0]).map_err(|message| Error::Shape {
                node: format!("#{i} ({})", node.op.name()),
                message,
            })?;
        }
        Ok(())
    }

    fn backward(&mut self, bindings: &Bindings<'_>, target: NodeId) -> Result<()> {
        for i in 0..=target.0 {
            if self.nodes[i].requires_grad {
                let n = self.resolve(bindings, NodeId(i))?.len();
                let g = &mut self.grads[i];
                g.clear();
                g.resize(n, 0.0);
            }
        }
        self.grads[target.0][0] = 1.0;
        for i in (0..=target.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let gout = std::mem::take(&mut self.grads[i]);
            let mut ins = Vec::with_capacity(node.inputs.len());
            for &j in &node.inputs {
                ins.push(Self::resolve_in(&self.nodes, &self.values, bindings, j)?);
            }
            let out = Self::resolve_in(&self.nodes, &self.values, bindings, NodeId(i))?;
            for (k, &j) in node.inputs.iter().enumerate() {
                if !self.nodes[j.0].requires_grad {
                    continue;
                }
                let mut gin = std::mem::take(&mut self.grads[j.0]);
                backward_op(&node.op, k, &ins, out, &gout, &mut gin);
                self.grads[j.0] = gin;
            }
            self.grads[i] = gout;
        }
        Ok(())
    }
}

/// Free-function form of [`Graph::evaluate_with_grad`].
pub fn evaluate_with_grad(graph: &mut Graph, inputs: &Bindings<'_>, wrt: &str) -> Result<Evaluation> {
    graph.evaluate_with_grad(inputs, wrt)
}

fn expect_ndim(t: &Tensor, ndim: usize, what: &str) -> Result<(), String> {
    if t.ndim() != ndim {
        return Err(format!("{what} must be {ndim}-D, got shape {:?}", t.shape()));
    }
    Ok(())
}

fn expect_same(a: &Tensor, b: &Tensor) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn unary(out: &mut Tensor, x: &Tensor, f: impl Fn(f64) -> f64) {
    out.reset(x.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = f(v);
    }
}

fn binary(out: &mut Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<(), String> {
    expect_same(a, b)?;
    out.reset(a.shape());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = f(x, y);
    }
    Ok(())
}

fn conv_geom(x: &Tensor, w: &Tensor, pad: usize) -> Result<ConvGeom, String> {
    expect_ndim(x, 4, "conv input")?;
    expect_ndim(w, 4, "conv weight")?;
    let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    if w.shape()[1] != c {
        return Err(format!(
            "weight expects {} input channels, input has {c}",
            w.shape()[1]
        ));
    }
    let g = ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kernel_h: w.shape()[2],
        kernel_w: w.shape()[3],
        pad,
    };
    if h + 2 * pad < g.kernel_h || wd + 2 * pad < g.kernel_w {
        return Err("kernel larger than padded input".into());
    }
    Ok(g)
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn forward_op(op: &Op, ins: &[&Tensor], out: &mut Tensor) -> Result<(), String> {
    match op {
        Op::Input(_) | Op::Param(_) | Op::Constant(_) => unreachable!("leaf nodes are not computed"),
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            expect_ndim(a, 2, "lhs")?;
            expect_ndim(b, 2, "rhs")?;
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if b.shape()[0] != k {
                return Err(format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()));
            }
            out.reset(&[n, m]);
            kernels::gemm(n, k, m, a.data(), false, b.data(), false, out.data_mut(), 0.0);
        }
        Op::AddBias => {
            let (a, b) = (ins[0], ins[1]);
            expect_ndim(a, 2, "lhs")?;
            expect_ndim(b, 1, "bias")?;
            let m = a.shape()[1];
            if b.len() != m {
                return Err(format!("bias length {} vs width {m}", b.len()));
            }
            out.reset(a.shape());
            for (orow, arow) in out.data_mut().chunks_mut(m).zip(a.data().chunks(m)) {
                for ((o, &x), &c) in orow.iter_mut().zip(arow).zip(b.data()) {
                    *o = x + c;
                }
            }
        }
        Op::Add => binary(out, ins[0], ins[1], |x, y| x + y)?,
        Op::Sub => binary(out, ins[0], ins[1], |x, y| x - y)?,
        Op::Mul => binary(out, ins[0], ins[1], |x, y| x * y)?,
        Op::Div => binary(out, ins[0], ins[1], |x, y| x / y)?,
        Op::Scale(s) => unary(out, ins[0], |x| x * s),
        Op::AddScalar(s) => unary(out, ins[0], |x| x + s),
        Op::Relu => unary(out, ins[0], |x| x.max(0.0)),
        Op::Log => unary(out, ins[0], f64::ln),
        Op::Exp => unary(out, ins[0], f64::exp),
        Op::Sqrt => unary(out, ins[0], f64::sqrt),
        Op::XLogX => unary(out, ins[0], |x| if x > 0.0 { x * x.ln() } else { 0.0 }),
        Op::Conv2d { pad } => {
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            let g = conv_geom(x, w, *pad)?;
            let o = w.shape()[0];
            if b.shape() != [o] {
                return Err(format!("bias shape {:?}, expected [{o}]", b.shape()));
            }
            let n = x.shape()[0];
            let (oh, ow) = (g.out_h(), g.out_w());
            out.reset(&[n, o, oh, ow]);
            let mut col = vec![0.0; g.col_rows() * g.col_cols()];
            let img_len = g.channels * g.height * g.width;
            let out_len = o * oh * ow;
            for s in 0..n {
                kernels::im2col(&x.data()[s * img_len..(s + 1) * img_len], &g, &mut col);
                let dst = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
                for (plane, &bias) in dst.chunks_mut(oh * ow).zip(b.data()) {
                    plane.iter_mut().for_each(|v| *v = bias);
                }
                kernels::gemm(o, g.col_rows(), oh * ow, w.data(), false, &col, false, dst, 1.0);
            }
        }
        Op::AvgPool2 => {
            let x = ins[0];
            expect_ndim(x, 4, "pool input")?;
            let s = x.shape();
            if s[2] < 2 || s[3] < 2 {
                return Err(format!("spatial extent {}x{} too small to pool", s[2], s[3]));
            }
            let shape = [s[0], s[1], s[2] / 2, s[3] / 2];
            out.reset(&shape);
            kernels::avg_pool2(x.data(), s[0] * s[1], s[2], s[3], out.data_mut());
        }
        Op::InstanceNorm => {
            let x = ins[0];
            expect_ndim(x, 4, "instance norm input")?;
            let hw = x.shape()[2] * x.shape()[3];
            out.reset(x.shape());
            for (o, v) in out.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)) {
                let mean = v.iter().sum::<f64>() / hw as f64;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / hw as f64;
                let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                for (oo, &a) in o.iter_mut().zip(v) {
                    *oo = (a - mean) * inv;
                }
            }
        }
        Op::Flatten => {
            let x = ins[0];
            if x.ndim() < 1 {
                return Err("cannot flatten a scalar".into());
            }
            out.reset(&[x.rows(), x.row_len()]);
            out.data_mut().copy_from_slice(x.data());
        }
        Op::Sum => {
            out.reset(&[]);
            out.data_mut()[0] = ins[0].data().iter().sum();
        }
        Op::Mean => {
            let x = ins[0];
            if x.is_empty() {
                return Err("mean of empty tensor".into());
            }
            out.reset(&[]);
            out.data_mut()[0] = x.data().iter().sum::<f64>() / x.len() as f64;
        }
        Op::SumRows => {
            let x = ins[0];
            expect_ndim(x, 2, "sum_rows input")?;
            let m = x.shape()[1];
            out.reset(&[x.shape()[0]]);
            for (o, row) in out.data_mut().iter_mut().zip(x.data().chunks(m.max(1))) {
                *o = row.iter().sum();
            }
        }
        Op::Softmax | Op::LogSoftmax => {
            let x = ins[0];
            expect_ndim(x, 2, "softmax input")?;
            let m = x.shape()[1];
            if m == 0 {
                return Err("softmax over zero classes".into());
            }
            out.reset(x.shape());
            let log = matches!(op, Op::LogSoftmax);
            for (o, z) in out.data_mut().chunks_mut(m).zip(x.data().chunks(m)) {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if log {
                    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for (oo, &v) in o.iter_mut().zip(z) {
                        *oo = v - lse;
                    }
                } else {
                    softmax_row(z, o);
                }
            }
        }
        Op::RowNorm => {
            let x = ins[0];
            expect_ndim(x, 2, "row_norm input")?;
            let m = x.shape()[1].max(1);
            out.reset(&[x.shape()[0]]);
            for (o, row) in out.data_mut().iter_mut().zip(x.data().chunks(m)) {
                *o = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            }
        }
        Op::RowDot => {
            let (a, b) = (ins[0], ins[1]);
            expect_ndim(a, 2, "row_dot lhs")?;
            expect_same(a, b)?;
            let m = a.shape()[1].max(1);
            out.reset(&[a.shape()[0]]);
            for ((o, ra), rb) in out
                .data_mut()
                .iter_mut()
                .zip(a.data().chunks(m))
                .zip(b.data().chunks(m))
            {
                *o = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            }
        }
        Op::Dot => {
            expect_same(ins[0], ins[1])?;
            out.reset(&[]);
            out.data_mut()[0] = ins[0].data().iter().zip(ins[1].data()).map(|(x, y)| x * y).sum();
        }
    }
    Ok(())
}

/// Accumulates the contribution of output gradient `gout` into the gradient
/// of input `k`.
fn backward_op(op: &Op, k: usize, ins: &[&Tensor], out: &Tensor, gout: &[f64], gin: &mut [f64]) {
    let acc = |gin: &mut [f64], f: &dyn Fn(usize) -> f64| {
        for (i, g) in gin.iter_mut().enumerate() {
            *g += f(i);
        }
    };
    match op {
        Op::Input(_) | Op::Param(_) | Op::Constant(_) => {}
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (n, kk, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if k == 0 {
                kernels::gemm(n, m, kk, gout, false, b.data(), true, gin, 1.0);
            } else {
                kernels::gemm(kk, n, m, a.data(), true, gout, false, gin, 1.0);
            }
        }
        Op::AddBias => {
            let m = ins[1].len();
            if k == 0 {
                acc(gin, &|i| gout[i]);
            } else {
                for row in gout.chunks(m) {
                    for (g, &v) in gin.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
        }
        Op::Add => acc(gin, &|i| gout[i]),
        Op::Sub => {
            let sign = if k == 0 { 1.0 } else { -1.0 };
            acc(gin, &|i| sign * gout[i]);
        }
        Op::Mul => {
            let other = ins[1 - k].data();
            acc(gin, &|i| gout[i] * other[i]);
        }
        Op::Div => {
            let (a, b) = (ins[0].data(), ins[1].data());
            if k == 0 {
                acc(gin, &|i| gout[i] / b[i]);
            } else {
                acc(gin, &|i| -gout[i] * a[i] / (b[i] * b[i]));
            }
        }
        Op::Scale(s) => acc(gin, &|i| s * gout[i]),
        Op::AddScalar(_) | Op::Flatten => acc(gin, &|i| gout[i]),
        Op::Relu => {
            let x = ins[0].data();
            acc(gin, &|i| if x[i] > 0.0 { gout[i] } else { 0.0 });
        }
        Op::Log => {
            let x = ins[0].data();
            acc(gin, &|i| gout[i] / x[i]);
        }
        Op::Exp => {
            let y = out.data();
            acc(gin, &|i| gout[i] * y[i]);
        }
        Op::Sqrt => {
            let y = out.data();
            acc(gin, &|i| gout[i] * 0.5 / y[i]);
        }
        Op::XLogX => {
            let x = ins[0].data();
            acc(gin, &|i| if x[i] > 0.0 { gout[i] * (x[i].ln() + 1.0) } else { 0.0 });
        }
        Op::Conv2d { pad } => {
            let (x, w) = (ins[0], ins[1]);
            let g = conv_geom(x, w, *pad).expect("validated in forward");
            let n = x.shape()[0];
            let o = w.shape()[0];
            let hw = g.out_h() * g.out_w();
            let img_len = g.channels * g.height * g.width;
            let (cr, cc) = (g.col_rows(), g.col_cols());
            match k {
                0 => {
                    let mut dcol = vec![0.0; cr * cc];
                    for s in 0..n {
                        let go = &gout[s * o * hw..(s + 1) * o * hw];
                        kernels::gemm(cr, o, cc, w.data(), true, go, false, &mut dcol, 0.0);
                        kernels::col2im_add(&dcol, &g, &mut gin[s * img_len..(s + 1) * img_len]);
                    }
                }
                1 => {
                    let mut col = vec![0.0; cr * cc];
                    for s in 0..n {
                        kernels::im2col(&x.data()[s * img_len..(s + 1) * img_len], &g, &mut col);
                        let go = &gout[s * o * hw..(s + 1) * o * hw];
                        kernels::gemm(o, cc, cr, go, false, &col, true, gin, 1.0);
                    }
                }
                _ => {
                    for s in 0..n {
                        let go = &gout[s * o * hw..(s + 1) * o * hw];
                        for (gb, plane) in gin.iter_mut().zip(go.chunks(hw)) {
                            *gb += plane.iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        Op::AvgPool2 => {
            let s = ins[0].shape();
            kernels::avg_pool2_backward(gout, s[0] * s[1], s[2], s[3], gin);
        }
        Op::InstanceNorm => {
            let x = ins[0];
            let hw = x.shape()[2] * x.shape()[3];
            let nf = hw as f64;
            for ((gi, v), (go, y)) in gin
                .chunks_mut(hw)
                .zip(x.data().chunks(hw))
                .zip(gout.chunks(hw).zip(out.data().chunks(hw)))
            {
                let mean = v.iter().sum::<f64>() / nf;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / nf;
                let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                let mean_g = go.iter().sum::<f64>() / nf;
                let mean_gy = go.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / nf;
                for ((g, &gg), &yy) in gi.iter_mut().zip(go).zip(y) {
                    *g += inv * (gg - mean_g - yy * mean_gy);
                }
            }
        }
        Op::Sum => acc(gin, &|_| gout[0]),
        Op::Mean => {
            let n = gin.len() as f64;
            acc(gin, &|_| gout[0] / n);
        }
        Op::SumRows => {
            let m = ins[0].shape()[1];
            acc(gin, &|i| gout[i / m]);
        }
        Op::Softmax => {
            let m = ins[0].shape()[1];
            for ((gi, go), s) in gin.chunks_mut(m).zip(gout.chunks(m)).zip(out.data().chunks(m)) {
                let dot: f64 = go.iter().zip(s).map(|(a, b)| a * b).sum();
                for ((g, &a), &p) in gi.iter_mut().zip(go).zip(s) {
                    *g += p * (a - dot);
                }
            }
        }
        Op::LogSoftmax => {
            let m = ins[0].shape()[1];
            for ((gi, go), ls) in gin.chunks_mut(m).zip(gout.chunks(m)).zip(out.data().chunks(m)) {
                let total: f64 = go.iter().sum();
                for ((g, &a), &l) in gi.iter_mut().zip(go).zip(ls) {
                    *g += a - l.exp() * total;
                }
            }
        }
        Op::RowNorm => {
            let x = ins[0];
            let m = x.shape()[1].max(1);
            for ((gi, row), (&go, &norm)) in gin
                .chunks_mut(m)
                .zip(x.data().chunks(m))
                .zip(gout.iter().zip(out.data()))
            {
                let raw = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if raw > NORM_FLOOR {
                    for (g, &v) in gi.iter_mut().zip(row) {
                        *g += go * v / norm;
                    }
                }
            }
        }
        Op::RowDot => {
            let other = ins[1 - k];
            let m = other.shape()[1].max(1);
            acc(gin, &|i| gout[i / m] * other.data()[i]);
        }
        Op::Dot => {
            let other = ins[1 - k].data();
            acc(gin, &|i| gout[0] * other[i]);
        }
    }
}
