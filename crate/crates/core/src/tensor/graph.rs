use std::collections::{BTreeMap, HashMap};

use super::{
    ParamId, ParamStore, Result, Scalar, Tensor, TensorError, INVERSE_SIGMOID_EPS, LAYER_NORM_EPS,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel kinds understood by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    /// 2-D matrix product.
    MatMul,
    Concat {
        axis: usize,
    },
    /// Select `indices` along `axis` (repeats allowed).
    Gather {
        axis: usize,
        indices: Vec<usize>,
    },
    /// Sum of all elements, scalar output.
    Sum,
    /// Mean of all elements, scalar output.
    Mean,
    Relu,
    Sigmoid,
    InverseSigmoid,
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    /// Normalisation over the last axis without affine terms.
    LayerNorm,
    Abs,
    Scale(f64),
    /// 2-D transpose.
    Transpose,
    Reshape {
        shape: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::InverseSigmoid => "inverse_sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm => "layer_norm",
            Op::Abs => "abs",
            Op::Scale(_) => "scale",
            Op::Transpose => "transpose",
            Op::Reshape { .. } => "reshape",
        }
    }

    /// Parses textual op specs such as `relu`, `softmax(1)`, `scale(0.5)`,
    /// `gather(0;2,1)` or `reshape(2,3)`.
    pub fn parse(spec: &str) -> Result<Op> {
        let spec = spec.trim();
        let (name, arg) = match spec.find('(') {
            Some(open) if spec.ends_with(')') => {
                (&spec[..open], Some(&spec[open + 1..spec.len() - 1]))
            }
            Some(_) => return Err(TensorError::UnsupportedOp(spec.to_string())),
            None => (spec, None),
        };
        let bad = || TensorError::UnsupportedOp(spec.to_string());
        let usize_arg = |a: Option<&str>| -> Result<usize> {
            a.ok_or_else(bad)?
                .trim()
                .parse::<usize>()
                .map_err(|_| bad())
        };
        let usize_list = |a: &str| -> Result<Vec<usize>> {
            a.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
                .collect()
        };
        let op = match (name, arg) {
            ("add", None) => Op::Add,
            ("sub", None) => Op::Sub,
            ("mul", None) => Op::Mul,
            ("matmul", None) => Op::MatMul,
            ("sum", None) => Op::Sum,
            ("mean", None) => Op::Mean,
            ("relu", None) => Op::Relu,
            ("sigmoid", None) => Op::Sigmoid,
            ("inverse_sigmoid", None) => Op::InverseSigmoid,
            ("layer_norm", None) => Op::LayerNorm,
            ("abs", None) => Op::Abs,
            ("transpose", None) => Op::Transpose,
            ("concat", a) => Op::Concat {
                axis: usize_arg(a)?,
            },
            ("softmax", a) => Op::Softmax {
                axis: usize_arg(a)?,
            },
            ("log_softmax", a) => Op::LogSoftmax {
                axis: usize_arg(a)?,
            },
            ("scale", Some(a)) => Op::Scale(a.trim().parse::<f64>().map_err(|_| bad())?),
            ("reshape", Some(a)) => Op::Reshape {
                shape: usize_list(a)?,
            },
            ("gather", Some(a)) => {
                let (axis, idx) = a.split_once(';').ok_or_else(bad)?;
                Op::Gather {
                    axis: axis.trim().parse().map_err(|_| bad())?,
                    indices: usize_list(idx)?,
                }
            }
            _ => return Err(bad()),
        };
        Ok(op)
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Op>,
    inputs: Vec<Var>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    param: Option<ParamId>,
}

/// Gradients of registered parameters, keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &GradMap<T>, scale: T) {
        for (id, g) in other.iter() {
            let entry = self
                .grads
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (a, &b) in entry.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Recording tape. Nodes are appended in evaluation order, so the node list
/// is always topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    /// rhs repeats over the leading dimensions of lhs.
    Rhs,
    /// lhs repeats over the leading dimensions of rhs.
    Lhs,
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() < long.len() && long[long.len() - short.len()..] == *short
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if is_suffix(b, a) {
        Ok(Bcast::Rhs)
    } else if is_suffix(a, b) {
        Ok(Bcast::Lhs)
    } else {
        Err(TensorError::shape(op, format!("{a:?} vs {b:?}")))
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn clamp_prob<T: Scalar>(x: T) -> (T, bool) {
    let eps = T::of(INVERSE_SIGMOID_EPS);
    let hi = T::one() - eps;
    if x < eps {
        (eps, true)
    } else if x > hi {
        (hi, true)
    } else {
        (x, false)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
            grad: None,
            param: None,
        })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Node {
            value: store.get(id).clone(),
            op: None,
            inputs: Vec::new(),
            requires_grad: true,
            grad: None,
            param: Some(id),
        });
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op(&self, v: Var) -> Option<&Op> {
        self.nodes[v.0].op.as_ref()
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::shape("graph", format!("unknown node {}", v.0)));
        }
        Ok(())
    }

    /// Evaluates `op` on `inputs` and records the result on the tape.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check_var(v)?;
        }
        let arity_ok = match op {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => inputs.len() == 2,
            Op::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(TensorError::shape(
                op.name(),
                format!("wrong number of inputs: {}", inputs.len()),
            ));
        }
        let value = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: inputs.to_vec(),
            requires_grad,
            grad: None,
            param: None,
        }))
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<Tensor<T>> {
        let x = &self.nodes[inputs[0].0].value;
        match op {
            Op::Add | Op::Sub | Op::Mul => {
                let y = &self.nodes[inputs[1].0].value;
                let kind = broadcast(op.name(), x.shape(), y.shape())?;
                let shape = if kind == Bcast::Lhs {
                    y.shape()
                } else {
                    x.shape()
                };
                let n: usize = shape.iter().product();
                let (xa, ya) = (x.data(), y.data());
                let (nx, ny) = (xa.len(), ya.len());
                let f: fn(T, T) -> T = match op {
                    Op::Add => |a, b| a + b,
                    Op::Sub => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let data = (0..n).map(|i| f(xa[i % nx], ya[i % ny])).collect();
                Tensor::new(shape.to_vec(), data)
            }
            Op::MatMul => {
                let y = &self.nodes[inputs[1].0].value;
                if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                    return Err(TensorError::shape(
                        "matmul",
                        format!("{:?} x {:?}", x.shape(), y.shape()),
                    ));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut out = vec![T::zero(); m * n];
                T::gemm(
                    m,
                    k,
                    n,
                    x.data(),
                    k as isize,
                    1,
                    y.data(),
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                );
                Tensor::new(vec![m, n], out)
            }
            Op::Concat { axis } => {
                let base = x.shape();
                let (outer, _, inner) = split_axis("concat", base, *axis)?;
                let mut total = 0;
                for &v in inputs {
                    let s = self.nodes[v.0].value.shape();
                    let same_rank = s.len() == base.len();
                    let others_match = same_rank
                        && s.iter()
                            .zip(base)
                            .enumerate()
                            .all(|(i, (a, b))| i == *axis || a == b);
                    if !others_match {
                        return Err(TensorError::shape(
                            "concat",
                            format!("{s:?} incompatible with {base:?} on axis {axis}"),
                        ));
                    }
                    total += s[*axis];
                }
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for &v in inputs {
                        let t = &self.nodes[v.0].value;
                        let chunk = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = base.to_vec();
                shape[*axis] = total;
                Tensor::new(shape, data)
            }
            Op::Gather { axis, indices } => {
                let (outer, len, inner) = split_axis("gather", x.shape(), *axis)?;
                if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
                    return Err(TensorError::shape(
                        "gather",
                        format!("index {bad} out of range {len}"),
                    ));
                }
                let mut data = Vec::with_capacity(outer * indices.len() * inner);
                for o in 0..outer {
                    for &i in indices {
                        let start = (o * len + i) * inner;
                        data.extend_from_slice(&x.data()[start..start + inner]);
                    }
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = indices.len();
                Tensor::new(shape, data)
            }
            Op::Sum => Ok(Tensor::scalar(x.data().iter().copied().sum())),
            Op::Mean => {
                if x.is_empty() {
                    return Err(TensorError::shape("mean", "empty tensor"));
                }
                let s: T = x.data().iter().copied().sum();
                Ok(Tensor::scalar(s / T::of(x.len() as f64)))
            }
            Op::Relu => map(x, |v| v.max(T::zero())),
            Op::Sigmoid => map(x, sigmoid),
            Op::InverseSigmoid => map(x, |v| {
                let (c, _) = clamp_prob(v);
                (c / (T::one() - c)).ln()
            }),
            Op::Abs => map(x, |v| v.abs()),
            Op::Scale(c) => {
                let c = T::of(*c);
                map(x, |v| v * c)
            }
            Op::Softmax { axis } | Op::LogSoftmax { axis } => {
                let log = matches!(op, Op::LogSoftmax { .. });
                let (outer, len, inner) = split_axis(op.name(), x.shape(), *axis)?;
                let mut out = vec![T::zero(); x.len()];
                let xd = x.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut mx = T::neg_infinity();
                        for j in 0..len {
                            mx = mx.max(xd[at(j)]);
                        }
                        let mut z = T::zero();
                        for j in 0..len {
                            z += (xd[at(j)] - mx).exp();
                        }
                        let lz = z.ln();
                        for j in 0..len {
                            let s = xd[at(j)] - mx;
                            out[at(j)] = if log { s - lz } else { s.exp() / z };
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::LayerNorm => {
                let d = *x
                    .shape()
                    .last()
                    .ok_or_else(|| TensorError::shape("layer_norm", "scalar input"))?;
                if d == 0 {
                    return Err(TensorError::shape("layer_norm", "empty last axis"));
                }
                let mut out = vec![T::zero(); x.len()];
                for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                    let (mean, inv_std) = row_stats(row);
                    for (o, &v) in dst.iter_mut().zip(row) {
                        *o = (v - mean) * inv_std;
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::Transpose => {
                if x.rank() != 2 {
                    return Err(TensorError::shape("transpose", format!("{:?}", x.shape())));
                }
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let xd = x.data();
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = xd[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], out)
            }
            Op::Reshape { shape } => x.clone().reshaped(shape.clone()),
        }
    }

    /// Reverse pass from a one-element `loss`. Gradients from any previous
    /// call are discarded first, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<T>> {
        self.check_var(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else {
                grads[idx] = Some(g);
                continue;
            };
            self.backprop_node(op, &node.inputs, &node.value, &g, &mut grads);
        }

        let mut out = GradMap::new();
        for (idx, slot) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if node.op.is_some() || !node.requires_grad {
                continue;
            }
            let g = slot.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            let t = Tensor::new(node.value.shape().to_vec(), g)?;
            if let Some(pid) = node.param {
                out.insert(pid, t.clone());
            }
            node.grad = Some(t);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        op: &Op,
        inputs: &[Var],
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (ad, bd) = (val(a).data(), val(b).data());
                let (na, nb) = (ad.len(), bd.len());
                if needs(a) {
                    let buf = slot(grads, a, na);
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % na] += match op {
                            Op::Mul => gi * bd[i % nb],
                            _ => gi,
                        };
                    }
                }
                if needs(b) {
                    let buf = slot(grads, b, nb);
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % nb] += match op {
                            Op::Add => gi,
                            Op::Sub => -gi,
                            _ => gi * ad[i % na],
                        };
                    }
                }
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if needs(a) {
                    // dA = G B^T
                    let bd = val(b).data();
                    let buf = slot(grads, a, m * k);
                    T::gemm(m, n, k, g, n as isize, 1, bd, 1, n as isize, T::one(), buf);
                }
                if needs(b) {
                    // dB = A^T G
                    let ad = val(a).data();
                    let buf = slot(grads, b, k * n);
                    T::gemm(k, m, n, ad, 1, k as isize, g, n as isize, 1, T::one(), buf);
                }
            }
            Op::Concat { axis } => {
                let (outer, total, inner) =
                    split_axis("concat", out.shape(), *axis).expect("validated in forward");
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis];
                    if needs(v) {
                        let buf = slot(grads, v, outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                buf[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather { axis, indices } => {
                let x = inputs[0];
                let (outer, len, inner) =
                    split_axis("gather", val(x).shape(), *axis).expect("validated in forward");
                let buf = slot(grads, x, outer * len * inner);
                for o in 0..outer {
                    for (p, &i) in indices.iter().enumerate() {
                        let src = (o * indices.len() + p) * inner;
                        let dst = (o * len + i) * inner;
                        for t in 0..inner {
                            buf[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::Sum | Op::Mean => {
                let x = inputs[0];
                let n = val(x).len();
                let gi = if matches!(op, Op::Mean) {
                    g[0] / T::of(n as f64)
                } else {
                    g[0]
                };
                for v in slot(grads, x, n).iter_mut() {
                    *v += gi;
                }
            }
            Op::Relu => {
                let x = inputs[0];
                let xd = val(x).data();
                let buf = slot(grads, x, xd.len());
                for i in 0..xd.len() {
                    if xd[i] > T::zero() {
                        buf[i] += g[i];
                    }
                }
            }
            Op::Sigmoid => {
                let x = inputs[0];
                let y = out.data();
                let buf = slot(grads, x, y.len());
                for i in 0..y.len() {
                    buf[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::InverseSigmoid => {
                let x = inputs[0];
                let xd = val(x).data();
                let buf = slot(grads, x, xd.len());
                for i in 0..xd.len() {
                    let (c, clamped) = clamp_prob(xd[i]);
                    if !clamped {
                        buf[i] += g[i] / (c * (T::one() - c));
                    }
                }
            }
            Op::Abs => {
                let x = inputs[0];
                let xd = val(x).data();
                let buf = slot(grads, x, xd.len());
                for i in 0..xd.len() {
                    if xd[i] > T::zero() {
                        buf[i] += g[i];
                    } else if xd[i] < T::zero() {
                        buf[i] -= g[i];
                    }
                }
            }
            Op::Scale(c) => {
                let x = inputs[0];
                let c = T::of(*c);
                let buf = slot(grads, x, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * c;
                }
            }
            Op::Softmax { axis } | Op::LogSoftmax { axis } => {
                let x = inputs[0];
                let (outer, len, inner) =
                    split_axis(op.name(), out.shape(), *axis).expect("validated in forward");
                let y = out.data();
                let log = matches!(op, Op::LogSoftmax { .. });
                let buf = slot(grads, x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        if log {
                            let gs: T = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                buf[at(j)] += g[at(j)] - y[at(j)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm => {
                let x = inputs[0];
                let xv = val(x);
                let d = *xv.shape().last().expect("validated in forward");
                let buf = slot(grads, x, xv.len());
                let inv_d = T::of(1.0 / d as f64);
                for ((row, yr), (gr, br)) in xv
                    .data()
                    .chunks(d)
                    .zip(out.data().chunks(d))
                    .zip(g.chunks(d).zip(buf.chunks_mut(d)))
                {
                    let (_, inv_std) = row_stats(row);
                    let mean_g: T = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        br[j] += inv_std * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }
            Op::Transpose => {
                let x = inputs[0];
                let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
                let buf = slot(grads, x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape { .. } => {
                let x = inputs[0];
                let buf = slot(grads, x, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i];
                }
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn gather(&mut self, x: Var, axis: usize, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather { axis, indices }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn inverse_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::InverseSigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax { axis }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LayerNorm, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape { shape }, &[x])
    }
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn row_stats<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt())
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}
