use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, ScanInputs};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Numeric mode of a graph. `F32` rounds every op output to single precision;
/// verification suites run in `F64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Silu,
    Tanh,
    Softplus,
    Exp,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => kernels::sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * kernels::sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => kernels::softplus(x),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = kernels::sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => kernels::sigmoid(x),
            Activation::Exp => y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MulChannelBroadcast(Var, Var),
    MatMul(Var, Var),
    Gather(Var, Rc<Vec<usize>>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Unary(Var, Activation),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    SumAll(Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    AvgPool2(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    CausalConv1d { x: Var, w: Var, reverse: bool },
    Scan(Box<ScanNode>),
    Mix { alpha: Var, prims: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct ScanNode {
    inputs: [Var; 6],
    states: Vec<f64>,
    reverse: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only computation tape. Nodes are created in topological order, so a
/// reverse sweep over the node list is a valid backward schedule.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    bound: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed back.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
    }

    /// Gradients of every parameter bound in `graph`, in binding order.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        graph
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let pid = n.param?;
                let g = self.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()));
                Some((pid, g))
            })
            .collect()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            bound: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, op_name: &'static str, mut value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// Binds a stored parameter into this graph. Repeated binds of the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = store.get(id).value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// `x[.., n] + bias[n]`
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).len() != n {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} vs trailing extent {n}", self.shape(bias)),
            ));
        }
        let mut v = self.value(x).clone();
        let b = self.data(bias).to_vec();
        for row in v.data_mut().chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push("add_row_bias", v, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// `x[B, C, ...] + bias[C]`
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.value(bias).len() != shape[1] {
            return Err(shape_err(
                "add_channel_bias",
                format!("x {shape:?} bias {:?}", self.shape(bias)),
            ));
        }
        let (outer, c, inner) = split_axis(&shape, 1);
        let mut v = self.value(x).clone();
        let b = self.data(bias).to_vec();
        let d = v.data_mut();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for e in &mut d[base..base + inner] {
                    *e += b[ch];
                }
            }
        }
        self.push("add_channel_bias", v, Op::AddChannelBias(x, bias), &[x, bias])
    }

    /// `x[B, C, H, W] ⊙ m[B, 1, H, W]`, broadcasting `m` over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        if xs.len() != 4 || ms.len() != 4 || ms[1] != 1 || xs[0] != ms[0] || xs[2..] != ms[2..] {
            return Err(shape_err("mul_channel_broadcast", format!("{xs:?} vs {ms:?}")));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut v = self.value(x).clone();
        let md = self.data(m).to_vec();
        let d = v.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for (e, mv) in d[base..base + hw].iter_mut().zip(&md[bi * hw..(bi + 1) * hw]) {
                    *e *= mv;
                }
            }
        }
        self.push("mul_channel_broadcast", v, Op::MulChannelBroadcast(x, m), &[x, m])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` for row-major activations `x[N, in]`, weights `w[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if index.iter().any(|&i| i >= n) {
            return Err(shape_err("gather", format!("index out of range for {n} values")));
        }
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape, data)?;
        self.push("gather", v, Op::Gather(x, index), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let idx: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(x, Rc::new(idx), vec![c, r])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let e = self.shape(x)[axis];
                data.extend_from_slice(&self.data(x)[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        self.push("concat", v, Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, e, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * e + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::new(shape, data)?;
        self.push("slice", v, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = self.value(x).map(|e| kind.apply(e));
        self.push(kind.name(), v, Op::Unary(x, kind), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Exp)
    }

    /// Max-shifted softmax. The normalizer is summed in sorted order so that
    /// permuting the logits permutes the output bit-for-bit.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {axis} for {s:?}")));
        }
        let (outer, e, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; e];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * e + j) * inner + i;
                let m = (0..e).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                for j in 0..e {
                    buf[j] = (src[at(j)] - m).exp();
                    out[at(j)] = buf[j];
                }
                let z = kernels::sorted_sum(&mut buf);
                for j in 0..e {
                    out[at(j)] /= z;
                }
            }
        }
        let v = Tensor::new(s, out)?;
        self.push("softmax", v, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes over the trailing axis (biased variance), then applies the
    /// affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| shape_err("layer_norm", "rank 0 input"))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} beta {:?} vs {n}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / n.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = g[j] * xh + b[j];
            }
        }
        let v = Tensor::new(s, out)?;
        self.push("layer_norm", v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, e, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..e {
                let base = (o * e + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= e as f64;
        }
        let mut shape = s;
        shape[axis] = 1;
        let v = Tensor::new(shape, out)?;
        self.push("mean_axis", v, Op::MeanAxis { x, axis }, &[x])
    }

    /// Max over `axis`, keeping it with extent 1. Ties route the gradient to
    /// the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("max_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, e, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for j in 0..e {
                let base = (o * e + j) * inner;
                for i in 0..inner {
                    if src[base + i] > out[o * inner + i] {
                        out[o * inner + i] = src[base + i];
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let v = Tensor::new(shape, out)?;
        self.push("max_axis", v, Op::MaxAxis { x, argmax }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.data(x).iter().sum());
        self.push("sum_all", v, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Cross-correlation of `x[B,C,H,W]` with `k[O,C,kh,kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(shape_err("conv2d", format!("input {xs:?} kernel {ks:?}")));
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d: stride must be >= 1".into()));
        }
        if ks[2] > xs[2] + 2 * pad || ks[3] > xs[3] + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", ks[2], ks[3], xs[2] + 2 * pad, xs[3] + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let out = kernels::conv2d(self.data(x), self.data(k), &geom);
        let v = Tensor::new(vec![xs[0], ks[0], oh, ow], out)?;
        self.push("conv2d", v, Op::Conv2d { x, k, geom }, &[x, k])
    }

    fn pool_shape(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err(op, format!("needs B×C×H×W with H,W >= 2, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// 2×2 average pooling, stride 2 (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.pool_shape("avg_pool2", x)?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = p * h * w + 2 * oy * w + 2 * ox;
                    out[(p * oh + oy) * ow + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let v = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push("avg_pool2", v, Op::AvgPool2(x), &[x])
    }

    /// 2×2 max pooling, stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.pool_shape("max_pool2", x)?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = p * h * w + 2 * oy * w + 2 * ox;
                    let mut best = i;
                    for cand in [i + 1, i + w, i + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let v = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push("max_pool2", v, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2", format!("{s:?}")));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![0.0; bc * 4 * h * w];
        for p in 0..bc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        self.push("upsample2", v, Op::Upsample2(x), &[x])
    }

    /// Depthwise causal convolution of `x[N, D]` with taps `w[D, W]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || ws[1] == 0 {
            return Err(shape_err("causal_conv1d", format!("x {xs:?} w {ws:?}")));
        }
        let out = kernels::causal_conv1d(self.data(x), self.data(w), xs[0], xs[1], ws[1], reverse);
        let v = Tensor::new(xs, out)?;
        self.push("causal_conv1d", v, Op::CausalConv1d { x, w, reverse }, &[x, w])
    }

    /// Selective scan over tokens. Shapes: `u`, `delta`: `N×D`; `a`: `D×S`;
    /// `b`, `c`: `N×S`; `d`: `D`. `reverse` processes tokens from last to first.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        reverse: bool,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let as_ = self.shape(a).to_vec();
        if us.len() != 2 || as_.len() != 2 || as_[0] != us[1] {
            return Err(shape_err("selective_scan", format!("u {us:?} A {as_:?}")));
        }
        let (n, dn, sn) = (us[0], us[1], as_[1]);
        let ok = self.shape(delta) == us.as_slice()
            && self.shape(b) == [n, sn]
            && self.shape(c) == [n, sn]
            && self.value(d).len() == dn;
        if !ok {
            return Err(shape_err(
                "selective_scan",
                format!(
                    "delta {:?} B {:?} C {:?} D {:?} for N={n} D={dn} S={sn}",
                    self.shape(delta),
                    self.shape(b),
                    self.shape(c),
                    self.shape(d)
                ),
            ));
        }
        let (y, states) = kernels::selective_scan(&ScanInputs {
            u: self.data(u),
            delta: self.data(delta),
            a: self.data(a),
            b: self.data(b),
            c: self.data(c),
            d: self.data(d),
            len: n,
            channels: dn,
            state: sn,
            reverse,
        });
        let v = Tensor::new(us, y)?;
        let node = ScanNode {
            inputs: [u, delta, a, b, c, d],
            states,
            reverse,
        };
        self.push("selective_scan", v, Op::Scan(Box::new(node)), &[u, delta, a, b, c, d])
    }

    /// `Σ_j alpha[j] · prims[j, :]`, accumulated in an order-independent way
    /// so that relabeling the rows leaves the result bit-identical.
    pub fn mix(&mut self, alpha: Var, prims: Var) -> Result<Var> {
        let ps = self.shape(prims).to_vec();
        let na = self.value(alpha).len();
        if ps.len() != 2 || ps[0] != na {
            return Err(shape_err("mix", format!("alpha {:?} prims {ps:?}", self.shape(alpha))));
        }
        let (n, d) = (ps[0], ps[1]);
        let (a, p) = (self.data(alpha), self.data(prims));
        let mut buf = vec![0.0; n];
        let out = (0..d)
            .map(|i| {
                for j in 0..n {
                    buf[j] = a[j] * p[j * d + i];
                }
                kernels::sorted_sum(&mut buf)
            })
            .collect();
        let v = Tensor::new(vec![d], out)?;
        self.push("mix", v, Op::Mix { alpha, prims }, &[alpha, prims])
    }

    /// Mean cross-entropy of `logits[B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
        }
        let (bn, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; bn * k];
        let mut total = 0.0;
        for r in 0..bn {
            let row = &src[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[labels[r]];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let v = Tensor::scalar(total / bn as f64);
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.shape(v).to_vec();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.accum(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => self.accum(grads, *a, gd.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => self.accum(grads, *a, gd.to_vec()),
            Op::AddRowBias(x, b) => {
                self.accum(grads, *x, gd.to_vec());
                let n = self.value(*b).len();
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n.max(1)) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accum(grads, *b, gb);
            }
            Op::AddChannelBias(x, b) => {
                self.accum(grads, *x, gd.to_vec());
                let (outer, c, inner) = split_axis(g.shape(), 1);
                let mut gb = vec![0.0; c];
                for o in 0..outer {
                    for (ch, gbc) in gb.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *gbc += gd[base..base + inner].iter().sum::<f64>();
                    }
                }
                self.accum(grads, *b, gb);
            }
            Op::MulChannelBroadcast(x, m) => {
                let s = self.shape(*x);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (vx, vm) = (self.data(*x), self.data(*m));
                let mut gx = vec![0.0; vx.len()];
                let mut gm = vec![0.0; vm.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            gx[base + p] = gd[base + p] * vm[bi * hw + p];
                            gm[bi * hw + p] += gd[base + p] * vx[base + p];
                        }
                    }
                }
                self.accum(grads, *x, gx);
                self.accum(grads, *m, gm);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) =
                    kernels::matmul_backward(self.data(*a), self.data(*b), gd, sa[0], sa[1], sb[1]);
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Gather(x, idx) => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &src) in idx.iter().enumerate() {
                    gx[src] += gd[o];
                }
                self.accum(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let e = self.shape(x)[*axis];
                    let mut gx = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&gd[base..base + e * inner]);
                    }
                    offset += e;
                    self.accum(grads, x, gx);
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, e, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * e + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum(grads, *x, gx);
            }
            Op::Reshape(x) => self.accum(grads, *x, gd.to_vec()),
            Op::Unary(x, kind) => {
                let (vx, vy) = (self.data(*x), node.value.data());
                let gx = gd
                    .iter()
                    .zip(vx.iter().zip(vy))
                    .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                self.accum(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, e, inner) = split_axis(g.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * e + j) * inner + i;
                        let dot: f64 = (0..e).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..e {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).len();
                let gamma_v = self.data(*gamma);
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * n..(r + 1) * n;
                    let (gy, xh) = (&gd[row.clone()], &xhat[row.clone()]);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = gy[j] * gamma_v[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        gg[j] += gy[j] * xh[j];
                        gb[j] += gy[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = gy[j] * gamma_v[j];
                        gx[r * n + j] = rs * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                self.accum(grads, *x, gx);
                self.accum(grads, *gamma, gg);
                self.accum(grads, *beta, gb);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, e, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * e * inner];
                for o in 0..outer {
                    for j in 0..e {
                        for ii in 0..inner {
                            gx[(o * e + j) * inner + ii] = gd[o * inner + ii] / e as f64;
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::MaxAxis { x, argmax } | Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += gd[o];
                }
                self.accum(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accum(grads, *x, vec![gd[0]; n]);
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(self.data(*x), self.data(*k), gd, geom);
                self.accum(grads, *x, dx);
                self.accum(grads, *k, dk);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; bc * h * w];
                for p in 0..bc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = 0.25 * gd[(p * oh + oy) * ow + ox];
                            let i = p * h * w + 2 * oy * w + 2 * ox;
                            for cand in [i, i + 1, i + w, i + w + 1] {
                                gx[cand] += gv;
                            }
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut gx = vec![0.0; bc * h * w];
                for p in 0..bc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::CausalConv1d { x, w, reverse } => {
                let xs = self.shape(*x);
                let width = self.shape(*w)[1];
                let (dx, dw) = kernels::causal_conv1d_backward(
                    self.data(*x),
                    self.data(*w),
                    gd,
                    xs[0],
                    xs[1],
                    width,
                    *reverse,
                );
                self.accum(grads, *x, dx);
                self.accum(grads, *w, dw);
            }
            Op::Scan(node) => {
                let [u, delta, a, b, c, d] = node.inputs;
                let us = self.shape(u);
                let inputs = ScanInputs {
                    u: self.data(u),
                    delta: self.data(delta),
                    a: self.data(a),
                    b: self.data(b),
                    c: self.data(c),
                    d: self.data(d),
                    len: us[0],
                    channels: us[1],
                    state: self.shape(a)[1],
                    reverse: node.reverse,
                };
                let sg = kernels::selective_scan_backward(&inputs, &node.states, gd);
                self.accum(grads, u, sg.u);
                self.accum(grads, delta, sg.delta);
                self.accum(grads, a, sg.a);
                self.accum(grads, b, sg.b);
                self.accum(grads, c, sg.c);
                self.accum(grads, d, sg.d);
            }
            Op::Mix { alpha, prims } => {
                let ps = self.shape(*prims);
                let (n, d) = (ps[0], ps[1]);
                let (a, p) = (self.data(*alpha), self.data(*prims));
                let mut ga = vec![0.0; n];
                let mut gp = vec![0.0; n * d];
                for j in 0..n {
                    for i in 0..d {
                        ga[j] += gd[i] * p[j * d + i];
                        gp[j * d + i] = a[j] * gd[i];
                    }
                }
                self.accum(grads, *alpha, ga);
                self.accum(grads, *prims, gp);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let bn = labels.len() as f64;
                let mut gx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * k + l] -= 1.0;
                }
                for v in &mut gx {
                    *v *= gd[0] / bn;
                }
                self.accum(grads, *logits, gx);
            }
        }
    }
}
