use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, split_axis, Tensor};
use super::GraphError;

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed primitive catalog.
#[derive(Clone, Debug)]
pub enum Op {
    /// Named leaf bound at evaluation time. Trainable leaves receive gradients.
    Input {
        name: String,
        trainable: bool,
    },
    Constant(Tensor),
    /// Matrix product over the last two axes, optionally transposing either side.
    /// Rank-3 operands are batched; a rank-2 right operand is shared across the batch.
    MatMul {
        trans_a: bool,
        trans_b: bool,
    },
    Add,
    Mul,
    Concat {
        axis: usize,
    },
    /// Softmax over the last axis.
    Softmax,
    /// Zero-mean unit-variance normalization over the last axis (no affine terms).
    LayerNorm {
        eps: f64,
    },
    Gelu,
    Exp,
    Log,
    /// Sum over one axis (kept with length one) or over everything.
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    Scale(f64),
    Reshape(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat { .. } => "concat",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Scale(_) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Append-only computation graph. Nodes can only reference earlier nodes, so
/// insertion order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<GraphNode>,
}

/// Named tensors bound to the graph's input leaves.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<A: Bindings + ?Sized, B: Bindings + ?Sized> Bindings for (&A, &B) {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
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

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(GraphNode { op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable named leaf.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_owned(),
                trainable: false,
            },
            vec![],
        )
    }

    /// Trainable named leaf.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_owned(),
                trainable: true,
            },
            vec![],
        )
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value), vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(
            Op::MatMul {
                trans_a: false,
                trans_b: false,
            },
            vec![a, b],
        )
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(
            Op::MatMul {
                trans_a: false,
                trans_b: true,
            },
            vec![a, b],
        )
    }

    pub fn matmul_ex(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> NodeId {
        self.push(Op::MatMul { trans_a, trans_b }, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![a])
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { eps }, vec![a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum { axis: None }, vec![a])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::Sum { axis: Some(axis) }, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean { axis: None }, vec![a])
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::Mean { axis: Some(axis) }, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(k), vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { axis, start, end }, vec![a])
    }

    /// Affine layer `x·W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Names of all trainable leaves, in insertion order, deduplicated.
    pub fn param_names(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name, trainable: true } if seen.insert(name.clone()) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Forward values of every node of a graph.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

fn mismatch(id: usize, op: &Op, expected: String, actual: Vec<Vec<usize>>) -> GraphError {
    GraphError::ShapeMismatch {
        node: id,
        op: op.kind(),
        expected,
        actual,
    }
}

/// Evaluates every node in topological order.
pub fn eval_graph<B: Bindings + ?Sized>(graph: &Graph, inputs: &B) -> Result<Evaluation, GraphError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (id, node) in graph.nodes.iter().enumerate() {
        let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
        let out = forward(id, &node.op, &args, inputs)?;
        values.push(out);
    }
    Ok(Evaluation { values })
}

/// Evaluates only the nodes appended to `graph` since `eval` was produced, so
/// a loss can be built from forward values without recomputing them.
pub fn resume_graph<B: Bindings + ?Sized>(graph: &Graph, eval: &mut Evaluation, inputs: &B) -> Result<(), GraphError> {
    for id in eval.values.len()..graph.nodes.len() {
        let node = &graph.nodes[id];
        let args: Vec<&Tensor> = node.inputs.iter().map(|i| &eval.values[i.0]).collect();
        let out = forward(id, &node.op, &args, inputs)?;
        eval.values.push(out);
    }
    Ok(())
}

fn forward<B: Bindings + ?Sized>(id: usize, op: &Op, args: &[&Tensor], inputs: &B) -> Result<Tensor, GraphError> {
    let shapes = || args.iter().map(|a| a.shape().to_vec()).collect::<Vec<_>>();
    Ok(match op {
        Op::Input { name, .. } => inputs
            .lookup(name)
            .cloned()
            .ok_or_else(|| GraphError::MissingInput { name: name.clone() })?,
        Op::Constant(t) => t.clone(),
        Op::MatMul { trans_a, trans_b } => {
            let dims = matmul_dims(args[0].shape(), args[1].shape(), *trans_a, *trans_b)
                .ok_or_else(|| mismatch(id, op, "compatible [.., m, k] x [.., k, n]".into(), shapes()))?;
            let mut out = Tensor::zeros(&dims.out_shape);
            for bi in 0..dims.batch {
                let a = &args[0].data()[bi * dims.a_stride..][..dims.a_stride];
                let b = &args[1].data()[bi * dims.b_stride..][..dims.m_k_n.1 * dims.m_k_n.2];
                let c = &mut out.data_mut()[bi * dims.m_k_n.0 * dims.m_k_n.2..][..dims.m_k_n.0 * dims.m_k_n.2];
                gemm(dims.m_k_n, a, *trans_a, b, *trans_b, c, false);
            }
            out
        }
        Op::Add | Op::Mul => {
            let (a, b) = (args[0], args[1]);
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| mismatch(id, op, "broadcast-compatible shapes".into(), shapes()))?;
            if a.shape() == b.shape() {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| if matches!(op, Op::Add) { x + y } else { x * y })
                    .collect();
                Tensor::new(shape, data)?
            } else {
                let sa = broadcast_strides(a.shape(), &shape);
                let sb = broadcast_strides(b.shape(), &shape);
                let mut out = Tensor::zeros(&shape);
                let (ad, bd) = (a.data(), b.data());
                let od = out.data_mut();
                let add = matches!(op, Op::Add);
                for_each_broadcast(&shape, &sa, &sb, |o, i, j| {
                    od[o] = if add { ad[i] + bd[j] } else { ad[i] * bd[j] };
                });
                out
            }
        }
        Op::Concat { axis } => {
            let first = args
                .first()
                .ok_or_else(|| mismatch(id, op, "at least one input".into(), vec![]))?;
            let rank = first.ndim();
            let ok = *axis < rank
                && args
                    .iter()
                    .all(|a| a.ndim() == rank && (0..rank).all(|d| d == *axis || a.shape()[d] == first.shape()[d]));
            if !ok {
                return Err(mismatch(
                    id,
                    op,
                    format!("equal shapes except along axis {axis}"),
                    shapes(),
                ));
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = args.iter().map(|a| a.shape()[*axis]).sum();
            let (outer, _, inner) = split_axis(&shape, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for a in args {
                    let chunk = a.shape()[*axis] * inner;
                    data.extend_from_slice(&a.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        }
        Op::Softmax => {
            let x = args[0];
            let n = *x.shape().last().unwrap();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            out
        }
        Op::LayerNorm { eps } => {
            let x = args[0];
            let n = *x.shape().last().unwrap();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            out
        }
        Op::Gelu => args[0].map(gelu),
        Op::Exp => args[0].map(f64::exp),
        Op::Log => args[0].map(f64::ln),
        Op::Sum { axis } | Op::Mean { axis } => {
            let x = args[0];
            let mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    Tensor::scalar(if mean { s / x.len() as f64 } else { s })
                }
                Some(axis) => {
                    if *axis >= x.ndim() {
                        return Err(mismatch(id, op, format!("rank > {axis}"), shapes()));
                    }
                    let (outer, n, inner) = split_axis(x.shape(), *axis);
                    let mut shape = x.shape().to_vec();
                    shape[*axis] = 1;
                    let mut out = Tensor::zeros(&shape);
                    let od = out.data_mut();
                    for o in 0..outer {
                        for k in 0..n {
                            let src = &x.data()[(o * n + k) * inner..][..inner];
                            for (d, s) in od[o * inner..][..inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    if mean {
                        od.iter_mut().for_each(|v| *v /= n as f64);
                    }
                    out
                }
            }
        }
        Op::Scale(k) => args[0].map(|v| v * k),
        Op::Reshape(shape) => args[0]
            .clone()
            .reshaped(shape.clone())
            .map_err(|_| mismatch(id, op, format!("{} elements as {shape:?}", args[0].len()), shapes()))?,
        Op::Slice { axis, start, end } => {
            let x = args[0];
            if *axis >= x.ndim() || start >= end || *end > x.shape()[*axis] {
                return Err(mismatch(
                    id,
                    op,
                    format!("axis {axis} range {start}..{end} in bounds"),
                    shapes(),
                ));
            }
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            Tensor::new(shape, data)?
        }
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct MatMulDims {
    batch: usize,
    m_k_n: (usize, usize, usize),
    a_stride: usize,
    b_stride: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Option<MatMulDims> {
    let (batch, a2, b2, shared_b) = match (a.len(), b.len()) {
        (2, 2) => (1, a, b, false),
        (3, 3) if a[0] == b[0] => (a[0], &a[1..], &b[1..], false),
        (3, 2) => (a[0], &a[1..], b, true),
        _ => return None,
    };
    let (m, k) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
    let (kb, n) = if tb { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
    if k != kb {
        return None;
    }
    let out_shape = if a.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
    Some(MatMulDims {
        batch,
        m_k_n: (m, k, n),
        a_stride: m * k,
        b_stride: if shared_b { 0 } else { k * n },
        out_shape,
    })
}

/// `c (+)= op(a) · op(b)` on row-major buffers, where `op(a)` is `m×k` and `op(b)` is `k×n`.
fn gemm((m, k, n): (usize, usize, usize), a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // Row-major A stored as m×k has (rs, cs) = (k, 1); stored transposed (k×m) it is (1, m).
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the row-major layouts of
    // `a` (m×k or k×m), `b` (k×n or n×k) and `c` (m×n), which do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients of a scalar output with respect to trainable leaves, keyed by name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Reverse-mode sweep from a scalar `output`.
///
/// Every trainable leaf gets an entry; leaves the output does not depend on get zeros.
pub fn backward(graph: &Graph, eval: &Evaluation, output: NodeId) -> Result<Gradients, GraphError> {
    let out_val = eval.value(output);
    if out_val.len() != 1 {
        return Err(GraphError::NonScalarOutput {
            shape: out_val.shape().to_vec(),
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
    grads[output.0] = Some(Tensor::full(out_val.shape(), 1.0));

    for id in (0..=output.0).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &graph.nodes[id];
        if let Op::Input { .. } | Op::Constant(_) = node.op {
            grads[id] = Some(g);
            continue;
        }
        let args: Vec<&Tensor> = node.inputs.iter().map(|i| eval.value(*i)).collect();
        let input_grads = node_backward(&node.op, &args, eval.value(NodeId(id)), &g);
        for (inp, ig) in node.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            match &mut grads[inp.0] {
                Some(acc) => acc.data_mut().iter_mut().zip(ig.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(ig),
            }
        }
    }

    let mut out = Gradients::new();
    for (id, node) in graph.nodes.iter().enumerate() {
        if let Op::Input { name, trainable: true } = &node.op {
            let shape = eval.value(NodeId(id)).shape();
            let g = grads
                .get(id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(shape));
            match out.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
    }
    Ok(out)
}

fn node_backward(op: &Op, args: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Input { .. } | Op::Constant(_) => vec![],
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (args[0], args[1]);
            let dims = matmul_dims(a.shape(), b.shape(), *trans_a, *trans_b).expect("validated in forward");
            let (m, k, n) = dims.m_k_n;
            let mut ga = Tensor::zeros(a.shape());
            let mut gb = Tensor::zeros(b.shape());
            for bi in 0..dims.batch {
                let ad = &a.data()[bi * dims.a_stride..][..m * k];
                let bd = &b.data()[bi * dims.b_stride..][..k * n];
                let gd = &g.data()[bi * m * n..][..m * n];
                let gad = &mut ga.data_mut()[bi * dims.a_stride..][..m * k];
                // d op(A) = G · op(B)ᵀ (m×k); d op(B) = op(A)ᵀ · G (k×n).
                if *trans_a {
                    // A is k×m: dA = op(B) · Gᵀ
                    gemm((k, n, m), bd, *trans_b, gd, true, gad, false);
                } else {
                    gemm((m, n, k), gd, false, bd, !*trans_b, gad, false);
                }
                let accumulate = dims.b_stride == 0 && bi > 0;
                let gbd = &mut gb.data_mut()[bi * dims.b_stride..][..k * n];
                if *trans_b {
                    // B is n×k: dB = Gᵀ · op(A)
                    gemm((n, m, k), gd, true, ad, *trans_a, gbd, accumulate);
                } else {
                    gemm((k, m, n), ad, !*trans_a, gd, false, gbd, accumulate);
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Add => vec![
            Some(reduce_to_shape(g, args[0].shape())),
            Some(reduce_to_shape(g, args[1].shape())),
        ],
        Op::Mul => {
            let (a, b) = (args[0], args[1]);
            let shape = g.shape();
            let sa = broadcast_strides(a.shape(), shape);
            let sb = broadcast_strides(b.shape(), shape);
            let mut ga = Tensor::zeros(shape);
            let mut gb = Tensor::zeros(shape);
            {
                let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                for_each_broadcast(shape, &sa, &sb, |o, i, j| {
                    gad[o] = gd[o] * bd[j];
                    gbd[o] = gd[o] * ad[i];
                });
            }
            vec![
                Some(reduce_to_shape(&ga, a.shape())),
                Some(reduce_to_shape(&gb, b.shape())),
            ]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            args.iter()
                .map(|a| {
                    let len = a.shape()[*axis];
                    let mut data = Vec::with_capacity(a.len());
                    for o in 0..outer {
                        data.extend_from_slice(
                            &g.data()[(o * total + offset) * inner..(o * total + offset + len) * inner],
                        );
                    }
                    offset += len;
                    Some(Tensor::new(a.shape().to_vec(), data).expect("concat grad shape"))
                })
                .collect()
        }
        Op::Softmax => {
            let n = *out.shape().last().unwrap();
            let mut gx = Tensor::zeros(out.shape());
            for ((gxr, yr), gr) in gx
                .data_mut()
                .chunks_mut(n)
                .zip(out.data().chunks(n))
                .zip(g.data().chunks(n))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in gxr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::LayerNorm { eps } => {
            let x = args[0];
            let n = *x.shape().last().unwrap();
            let mut gx = Tensor::zeros(x.shape());
            for (((gxr, xr), yr), gr) in gx
                .data_mut()
                .chunks_mut(n)
                .zip(x.data().chunks(n))
                .zip(out.data().chunks(n))
                .zip(g.data().chunks(n))
            {
                let mean = xr.iter().sum::<f64>() / n as f64;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let g_mean = gr.iter().sum::<f64>() / n as f64;
                let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                for ((d, g), y) in gxr.iter_mut().zip(gr).zip(yr) {
                    *d = inv * (g - g_mean - y * gy_mean);
                }
            }
            vec![Some(gx)]
        }
        Op::Gelu => {
            let x = args[0];
            let data = x.data().iter().zip(g.data()).map(|(&x, &g)| g * gelu_grad(x)).collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
        }
        Op::Exp => {
            let data = out.data().iter().zip(g.data()).map(|(y, g)| y * g).collect();
            vec![Some(Tensor::new(out.shape().to_vec(), data).unwrap())]
        }
        Op::Log => {
            let x = args[0];
            let data = x.data().iter().zip(g.data()).map(|(x, g)| g / x).collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let x = args[0];
            let mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let k = if mean { 1.0 / x.len() as f64 } else { 1.0 };
                    vec![Some(Tensor::full(x.shape(), g.data()[0] * k))]
                }
                Some(axis) => {
                    let (outer, n, inner) = split_axis(x.shape(), *axis);
                    let k = if mean { 1.0 / n as f64 } else { 1.0 };
                    let mut gx = Tensor::zeros(x.shape());
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        let src = &g.data()[o * inner..][..inner];
                        for j in 0..n {
                            for (d, s) in gxd[(o * n + j) * inner..][..inner].iter_mut().zip(src) {
                                *d = s * k;
                            }
                        }
                    }
                    vec![Some(gx)]
                }
            }
        }
        Op::Scale(k) => vec![Some(g.map(|v| v * k))],
        Op::Reshape(_) => vec![Some(
            g.clone().reshaped(args[0].shape().to_vec()).expect("reshape grad"),
        )],
        Op::Slice { axis, start, end } => {
            let x = args[0];
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let w = end - start;
            let mut gx = Tensor::zeros(x.shape());
            let gxd = gx.data_mut();
            for o in 0..outer {
                gxd[(o * n + start) * inner..(o * n + end) * inner]
                    .copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(gx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn resumed_evaluation_matches_a_fresh_one() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.exp(x);
        let b = bind(&[("x", Tensor::full(&[2], 0.5)), ("k", Tensor::full(&[2], 3.0))]);
        let mut ev = eval_graph(&g, &b).unwrap();
        let k = g.input("k");
        let p = g.mul(y, k);
        let out = g.sum(p);
        resume_graph(&g, &mut ev, &b).unwrap();
        let fresh = eval_graph(&g, &b).unwrap();
        assert_eq!(ev.value(out), fresh.value(out));
        assert_eq!(backward(&g, &ev, out).unwrap(), backward(&g, &fresh, out).unwrap());
    }

    #[test]
    fn softmax_uniform_and_ln2() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x);
        let ev = eval_graph(&g, &bind(&[("x", Tensor::zeros(&[1, 3]))])).unwrap();
        for v in ev.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let logits = Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let ev = eval_graph(&g, &bind(&[("x", logits)])).unwrap();
        let p = ev.value(s).data();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x);
        let a = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = a.map(|v| v + 1000.0);
        let pa = eval_graph(&g, &bind(&[("x", a)])).unwrap().value(s).clone();
        let pb = eval_graph(&g, &bind(&[("x", b)])).unwrap().value(s).clone();
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((pa.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input("i");
        let a = g.input("a");
        let p = g.matmul(i, a);
        let eye = Tensor::from_fn(&[3, 3], |k| if k / 3 == k % 3 { 1.0 } else { 0.0 });
        let m = Tensor::from_fn(&[3, 5], |k| k as f64 * 0.7 - 2.0);
        let ev = eval_graph(&g, &bind(&[("i", eye), ("a", m.clone())])).unwrap();
        assert_eq!(ev.value(p), &m);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let _ = g.matmul(a, b);
        let err = eval_graph(
            &g,
            &bind(&[("a", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[4, 2]))]),
        )
        .unwrap_err();
        match err {
            GraphError::ShapeMismatch { node, op, actual, .. } => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
                assert_eq!(actual, vec![vec![2, 3], vec![4, 2]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param("x");
        let sq = g.square(x);
        let s = g.sum(sq);
        let params = bind(&[("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        let ev = eval_graph(&g, &params).unwrap();
        let grads = backward(&g, &ev, s).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_output_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x");
        let c = g.constant(Tensor::scalar(3.0));
        let _unused = g.scale(x, 2.0);
        let out = g.scale(c, 1.0);
        let params = bind(&[("x", Tensor::full(&[4], 1.0))]);
        let ev = eval_graph(&g, &params).unwrap();
        let grads = backward(&g, &ev, out).unwrap();
        assert_eq!(grads["x"].data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.param("x");
        let params = bind(&[("x", Tensor::full(&[4], 1.0))]);
        let ev = eval_graph(&g, &params).unwrap();
        assert!(matches!(backward(&g, &ev, x), Err(GraphError::NonScalarOutput { .. })));
    }

    #[test]
    fn linear_sum_gradient_is_exact() {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        let params = bind(&[("x", Tensor::from_fn(&[5], |i| i as f64))]);
        let ev = eval_graph(&g, &params).unwrap();
        let grads = backward(&g, &ev, s).unwrap();
        assert!(grads["x"].data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param("w");
        let h = g.matmul(x, w);
        let n = g.layer_norm(h, 1e-5);
        let a = g.gelu(n);
        let s = g.softmax(a);
        let params = bind(&[
            ("x", Tensor::from_fn(&[4, 3], |i| (i as f64).sin())),
            ("w", Tensor::from_fn(&[3, 6], |i| (i as f64 * 0.3).cos())),
        ]);
        let a1 = eval_graph(&g, &params).unwrap().value(s).clone();
        let a2 = eval_graph(&g, &params).unwrap().value(s).clone();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a2));
    }
}
