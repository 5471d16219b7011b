//! Minimal dense-tensor library with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes; every operation records its
//! parents and computes its value eagerly, so node ids are already in
//! topological order. Frozen inputs (notably the intermediate features of the
//! frozen backbone) enter as constant leaves: they are never part of any
//! backward path, which is what makes side-network training independent of
//! backbone depth.
//!
//! [`Graph::backward`] walks ids from the loss downwards and only processes
//! nodes that lie on a path from a trainable leaf to the loss; the visit count
//! is reported so that property can be asserted directly.
//!
//! Values are stored and accumulated in f64 to keep central-finite-difference
//! checks meaningful at tolerances of 1e-4 and below.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A plain shape + data container, the unit of parameter and feature storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {numel} values, got {}", shape, data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Seeded Gaussian init with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}

/// A named model weight. Frozen parameters never accumulate gradient: they
/// are inserted into graphs as constants.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn trainable(tensor: Tensor) -> Self {
        Self {
            tensor,
            frozen: false,
        }
    }

    pub fn frozen(tensor: Tensor) -> Self {
        Self {
            tensor,
            frozen: true,
        }
    }
}

/// An ordered, named collection of parameters (insertion order is the
/// deterministic iteration order used by the optimizer).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Parameter)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Parameter) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, param));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).copied().map(|i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts every parameter into `g` (trainable leaf or frozen constant)
    /// and returns the name -> node binding.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut map = HashMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let id = if p.frozen {
                g.constant(p.tensor.clone())
            } else {
                g.leaf(p.tensor.clone())
            };
            ids.push((name.clone(), id));
            map.insert(name.clone(), id);
        }
        BoundParams { ids, map }
    }
}

/// Graph bindings produced by [`ParamSet::bind`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<(String, NodeId)>,
    map: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.map[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a * x + b` elementwise; only the multiplier matters in backward.
    Affine(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    PowConst(NodeId, f64),
    /// x ^ p elementwise, p a scalar node (trainable GeM exponent).
    PowBroadcast(NodeId, NodeId),
    ClampMin(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Softmax(NodeId),
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Concat {
        axis: usize,
        parts: Vec<NodeId>,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    L2NormalizeRows(NodeId),
    SteSign(NodeId),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar loss with respect to every node on a path from a
/// trainable leaf to that loss.
pub struct Gradients {
    grads: HashMap<NodeId, Vec<f64>>,
    visited_nodes: usize,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited_nodes(&self) -> usize {
        self.visited_nodes
    }
}

/// Recorded computation DAG with eager forward evaluation.
#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    /// Frozen leaf: backward never reaches it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t.shape, t.data, Op::Constant, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: &[f64]) -> Result<NodeId> {
        Ok(self.constant(Tensor::new(shape.to_vec(), data.to_vec())?))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Mul(a, b), rg))
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| a * v + b).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, Op::Affine(x, a), rg)
    }

    pub fn scale(&mut self, x: NodeId, a: f64) -> NodeId {
        self.affine(x, a, 0.0)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].value.iter().any(|&v| v <= 0.0) {
            return Err(Error::shape("ln", "domain: all entries must be > 0"));
        }
        let value = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(self.nodes[x.0].shape.clone(), value, Op::Ln(x), rg))
    }

    /// `x ^ c` elementwise with a constant exponent.
    pub fn pow_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let integral = c.fract() == 0.0 && c >= 0.0;
        if !integral && self.nodes[x.0].value.iter().any(|&v| v <= 0.0) {
            return Err(Error::shape(
                "pow_const",
                "domain: entries must be > 0 for non-integer or negative exponents",
            ));
        }
        let value = self.nodes[x.0].value.iter().map(|v| v.powf(c)).collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(self.nodes[x.0].shape.clone(), value, Op::PowConst(x, c), rg))
    }

    /// `x ^ p` elementwise where `p` is a scalar node; entries must be > 0.
    pub fn pow_broadcast(&mut self, x: NodeId, p: NodeId) -> Result<NodeId> {
        if self.nodes[p.0].value.len() != 1 {
            return Err(Error::shape("pow", "exponent must be a scalar node"));
        }
        if self.nodes[x.0].value.iter().any(|&v| v <= 0.0) {
            return Err(Error::shape("pow", "domain: entries must be > 0"));
        }
        let pv = self.nodes[p.0].value[0];
        let value = self.nodes[x.0].value.iter().map(|v| v.powf(pv)).collect();
        let rg = self.any_grad(&[x, p]);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            value,
            Op::PowBroadcast(x, p),
            rg,
        ))
    }

    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| v.max(min)).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, Op::ClampMin(x, min), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..m {
                for l in 0..k {
                    let x = av[i * k + l];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    let orow = &mut value[i * n..(i + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not rank-2")));
        }
        let (m, n) = (s[0], s[1]);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, m], value, Op::Transpose(x), rg))
    }

    /// Adds a length-n bias vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sx[1];
        let bv = self.nodes[b.0].value.clone();
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(self.nodes[x.0].shape.clone(), value, Op::AddBias(x, b), rg))
    }

    /// `x @ w + b` for row-major token matrices.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    // ---- normalization and attention pieces ----

    /// Row-wise layer normalization with gain and bias over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 2 || sg != [sx[1]] || sb != [sx[1]] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {sx:?}, gamma {sg:?}, beta {sb:?}"),
            ));
        }
        let (m, n) = (sx[0], sx[1]);
        let mut value = vec![0.0; m * n];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gamma.0].value;
            let bv = &self.nodes[beta.0].value;
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    value[i * n + j] = (row[j] - mean) * inv * gv[j] + bv[j];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            vec![m, n],
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis of an `[m, n]` matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("softmax", format!("{s:?} is not rank-2")));
        }
        let (m, n) = (s[0], s[1]);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                value[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                value[i * n + j] /= sum;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![m, n], value, Op::Softmax(x), rg))
    }

    // ---- convolution ----

    /// 2-D convolution, stride 1, same (zero) padding, channels-last.
    ///
    /// `x` is `[h, w, c_in]`, `kernel` is `[kh, kw, c_in, c_out]` with odd
    /// `kh`/`kw`, `bias` is `[c_out]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 3 || sk.len() != 4 || sb.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("x {sx:?}, kernel {sk:?}, bias {sb:?}"),
            ));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, kcin, cout) = (sk[0], sk[1], sk[2], sk[3]);
        if kcin != cin || sb[0] != cout {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {sk:?} does not match input {sx:?} / bias {sb:?}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                "same padding requires odd kernel sizes",
            ));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let mut value = vec![0.0; h * w * cout];
        {
            let xv = &self.nodes[x.0].value;
            let kv = &self.nodes[kernel.0].value;
            let bv = &self.nodes[bias.0].value;
            for oh in 0..h {
                for ow in 0..w {
                    let out = &mut value[(oh * w + ow) * cout..(oh * w + ow + 1) * cout];
                    out.copy_from_slice(bv);
                    for dh in 0..kh {
                        let ih = oh as isize + dh as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dw in 0..kw {
                            let iw = ow as isize + dw as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let xbase = (ih as usize * w + iw as usize) * cin;
                            let kbase = (dh * kw + dw) * cin * cout;
                            for ci in 0..cin {
                                let xval = xv[xbase + ci];
                                if xval == 0.0 {
                                    continue;
                                }
                                let krow = &kv[kbase + ci * cout..kbase + (ci + 1) * cout];
                                for (o, &kval) in out.iter_mut().zip(krow) {
                                    *o += xval * kval;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(vec![h, w, cout], value, Op::Conv2d { x, kernel, bias }, rg))
    }

    // ---- shape plumbing ----

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts"));
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for rank {}", base.len()),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible part shape {s:?} vs {base:?} on axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;

        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = vec![0.0; shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let plen = self.shape(p)[axis];
            let pv = &self.nodes[p.0].value;
            for o in 0..outer {
                let src = &pv[o * plen * inner..(o + 1) * plen * inner];
                let dst = &mut value[o * out_stride + offset..o * out_stride + offset + plen * inner];
                dst.copy_from_slice(src);
            }
            offset += plen * inner;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut value = vec![0.0; shape.iter().product()];
        let in_stride = s[axis] * inner;
        let xv = &self.nodes[x.0].value;
        for o in 0..outer {
            let src = &xv[o * in_stride + start * inner..o * in_stride + (start + len) * inner];
            value[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            shape,
            value,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    // ---- reductions ----

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || axis > 1 {
            return Err(Error::shape(
                "reduce_axis",
                format!("{s:?} axis {axis} (rank-2 only)"),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let xv = &self.nodes[x.0].value;
        let (out_len, value) = if axis == 0 {
            let mut acc = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    acc[j] += xv[i * n + j];
                }
            }
            if mean {
                for a in &mut acc {
                    *a /= m as f64;
                }
            }
            (n, acc)
        } else {
            let mut acc = vec![0.0; m];
            for i in 0..m {
                acc[i] = xv[i * n..(i + 1) * n].iter().sum();
                if mean {
                    acc[i] /= n as f64;
                }
            }
            (m, acc)
        };
        let rg = self.nodes[x.0].requires_grad;
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        Ok(self.push(vec![out_len], value, op, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![total], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len() as f64;
        let total: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![total / n], Op::MeanAll(x), rg)
    }

    // ---- descriptor-specific ----

    /// Scales each row of a rank-1 or rank-2 tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let (m, n) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::shape("l2_normalize", format!("{s:?}"))),
        };
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-30 {
                return Err(Error::ZeroVector);
            }
            for j in 0..n {
                value[i * n + j] = row[j] / norm;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            value,
            Op::L2NormalizeRows(x),
            rg,
        ))
    }

    /// Sign quantization with a straight-through backward rule: forward is
    /// `sgn` (entries < 0 map to -1, all others to +1), backward passes the
    /// incoming gradient through unchanged (identity surrogate).
    pub fn ste_sign(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].value.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { context: "ste_sign" });
        }
        let value = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v < 0.0 { -1.0 } else { 1.0 })
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(self.nodes[x.0].shape.clone(), value, Op::SteSign(x), rg))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar `loss`. Only nodes on a path from a
    /// trainable leaf to the loss are processed; constants and frozen
    /// parameters are never touched.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: HashMap<NodeId, Vec<f64>> = HashMap::new();
        let mut needed = vec![false; loss.0 + 1];
        let mut visited_nodes = 0;
        if self.nodes[loss.0].requires_grad {
            needed[loss.0] = true;
            grads.insert(loss, vec![1.0]);
        }

        for raw in (0..=loss.0).rev() {
            if !needed[raw] {
                continue;
            }
            let id = NodeId(raw);
            visited_nodes += 1;
            let gy = grads.get(&id).expect("needed node has gradient").clone();
            let node = &self.nodes[raw];

            let send = |this: &Self,
                            grads: &mut HashMap<NodeId, Vec<f64>>,
                            needed: &mut Vec<bool>,
                            parent: NodeId,
                            contribution: Vec<f64>| {
                if !this.nodes[parent.0].requires_grad {
                    return;
                }
                needed[parent.0] = true;
                let slot = grads
                    .entry(parent)
                    .or_insert_with(|| vec![0.0; this.nodes[parent.0].value.len()]);
                for (s, c) in slot.iter_mut().zip(contribution) {
                    *s += c;
                }
            };

            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    send(self, &mut grads, &mut needed, *a, gy.clone());
                    send(self, &mut grads, &mut needed, *b, gy.clone());
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga: Vec<f64> = gy.iter().zip(bv).map(|(g, v)| g * v).collect();
                    let gb: Vec<f64> = gy.iter().zip(av).map(|(g, v)| g * v).collect();
                    send(self, &mut grads, &mut needed, *a, ga);
                    send(self, &mut grads, &mut needed, *b, gb);
                }
                Op::Affine(x, a) => {
                    let gx = gy.iter().map(|g| g * a).collect();
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA = dY . B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gy[i * n + j] * bv[l * n + j];
                            }
                            ga[i * k + l] = acc;
                        }
                    }
                    // dB = A^T . dY
                    let mut gb = vec![0.0; k * n];
                    for l in 0..k {
                        for i in 0..m {
                            let x = av[i * k + l];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[l * n + j] += x * gy[i * n + j];
                            }
                        }
                    }
                    send(self, &mut grads, &mut needed, *a, ga);
                    send(self, &mut grads, &mut needed, *b, gb);
                }
                Op::Transpose(x) => {
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let mut gx = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            gx[j * n + i] = gy[i * m + j];
                        }
                    }
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::AddBias(x, b) => {
                    let n = self.nodes[b.0].value.len();
                    let mut gb = vec![0.0; n];
                    for (i, g) in gy.iter().enumerate() {
                        gb[i % n] += g;
                    }
                    send(self, &mut grads, &mut needed, *x, gy.clone());
                    send(self, &mut grads, &mut needed, *b, gb);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = gy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = gy.iter().zip(&node.value).map(|(g, y)| g * y).collect();
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::Ln(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = gy.iter().zip(xv).map(|(g, v)| g / v).collect();
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::PowConst(x, c) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = gy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| g * c * v.powf(c - 1.0))
                        .collect();
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::PowBroadcast(x, p) => {
                    let xv = &self.nodes[x.0].value;
                    let pv = self.nodes[p.0].value[0];
                    let gx: Vec<f64> = gy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| g * pv * v.powf(pv - 1.0))
                        .collect();
                    let gp: f64 = gy
                        .iter()
                        .zip(xv)
                        .zip(&node.value)
                        .map(|((g, &v), y)| g * y * v.ln())
                        .sum();
                    send(self, &mut grads, &mut needed, *x, gx);
                    send(self, &mut grads, &mut needed, *p, vec![gp]);
                }
                Op::ClampMin(x, min) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = gy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > *min { *g } else { 0.0 })
                        .collect();
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let mut gx = vec![0.0; m * n];
                    let mut ggamma = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gyr = &gy[i * n..(i + 1) * n];
                        let mut sum_dg = 0.0;
                        let mut sum_dg_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let dg = gyr[j] * gv[j];
                            sum_dg += dg;
                            sum_dg_xhat += dg * xhat;
                            ggamma[j] += gyr[j] * xhat;
                            gbeta[j] += gyr[j];
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let dg = gyr[j] * gv[j];
                            gx[i * n + j] =
                                (dg - inv_n * sum_dg - xhat * inv_n * sum_dg_xhat) * inv;
                        }
                    }
                    send(self, &mut grads, &mut needed, *x, gx);
                    send(self, &mut grads, &mut needed, *gamma, ggamma);
                    send(self, &mut grads, &mut needed, *beta, gbeta);
                }
                Op::Softmax(x) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let y = &node.value;
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gy[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::Conv2d { x, kernel, bias } => {
                    let sx = &self.nodes[x.0].shape;
                    let sk = &self.nodes[kernel.0].shape;
                    let (h, w, cin) = (sx[0], sx[1], sx[2]);
                    let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
                    let (ph, pw) = (kh / 2, kw / 2);
                    let xv = &self.nodes[x.0].value;
                    let kv = &self.nodes[kernel.0].value;
                    let mut gx = vec![0.0; h * w * cin];
                    let mut gk = vec![0.0; kh * kw * cin * cout];
                    let mut gb = vec![0.0; cout];
                    for oh in 0..h {
                        for ow in 0..w {
                            let gout = &gy[(oh * w + ow) * cout..(oh * w + ow + 1) * cout];
                            for (co, g) in gout.iter().enumerate() {
                                gb[co] += g;
                            }
                            for dh in 0..kh {
                                let ih = oh as isize + dh as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let iw = ow as isize + dw as isize - pw as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let xbase = (ih as usize * w + iw as usize) * cin;
                                    let kbase = (dh * kw + dw) * cin * cout;
                                    for ci in 0..cin {
                                        let xval = xv[xbase + ci];
                                        let krow =
                                            &kv[kbase + ci * cout..kbase + (ci + 1) * cout];
                                        let mut gx_acc = 0.0;
                                        let gkrow =
                                            &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                        for ((g, &kval), gkv) in
                                            gout.iter().zip(krow).zip(gkrow.iter_mut())
                                        {
                                            gx_acc += g * kval;
                                            *gkv += g * xval;
                                        }
                                        gx[xbase + ci] += gx_acc;
                                    }
                                }
                            }
                        }
                    }
                    send(self, &mut grads, &mut needed, *x, gx);
                    send(self, &mut grads, &mut needed, *kernel, gk);
                    send(self, &mut grads, &mut needed, *bias, gb);
                }
                Op::Concat { axis, parts } => {
                    let shape = &node.shape;
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let out_stride = shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let plen = self.nodes[p.0].shape[*axis];
                        let mut gp = vec![0.0; self.nodes[p.0].value.len()];
                        for o in 0..outer {
                            let src = &gy
                                [o * out_stride + offset..o * out_stride + offset + plen * inner];
                            gp[o * plen * inner..(o + 1) * plen * inner].copy_from_slice(src);
                        }
                        offset += plen * inner;
                        send(self, &mut grads, &mut needed, p, gp);
                    }
                }
                Op::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    let sx = &self.nodes[x.0].shape;
                    let outer: usize = sx[..*axis].iter().product();
                    let inner: usize = sx[*axis + 1..].iter().product();
                    let in_stride = sx[*axis] * inner;
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    for o in 0..outer {
                        let dst = &mut gx
                            [o * in_stride + start * inner..o * in_stride + (start + len) * inner];
                        let src = &gy[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::Reshape(x) => {
                    send(self, &mut grads, &mut needed, *x, gy.clone());
                }
                Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                    let sx = &self.nodes[x.0].shape;
                    let (m, n) = (sx[0], sx[1]);
                    let mean = matches!(node.op, Op::MeanAxis(..));
                    let mut gx = vec![0.0; m * n];
                    if *axis == 0 {
                        let f = if mean { 1.0 / m as f64 } else { 1.0 };
                        for i in 0..m {
                            for j in 0..n {
                                gx[i * n + j] = gy[j] * f;
                            }
                        }
                    } else {
                        let f = if mean { 1.0 / n as f64 } else { 1.0 };
                        for i in 0..m {
                            for j in 0..n {
                                gx[i * n + j] = gy[i] * f;
                            }
                        }
                    }
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::SumAll(x) => {
                    let gx = vec![gy[0]; self.nodes[x.0].value.len()];
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].value.len();
                    let gx = vec![gy[0] / n as f64; n];
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::L2NormalizeRows(x) => {
                    let s = &self.nodes[x.0].shape;
                    let (m, n) = match s.len() {
                        1 => (1, s[0]),
                        _ => (s[0], s[1]),
                    };
                    let xv = &self.nodes[x.0].value;
                    let y = &node.value;
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gy[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    send(self, &mut grads, &mut needed, *x, gx);
                }
                Op::SteSign(x) => {
                    // Straight-through: gradient passes unchanged.
                    send(self, &mut grads, &mut needed, *x, gy.clone());
                }
            }
        }
        Ok(Gradients {
            grads,
            visited_nodes,
        })
    }
}

/// Central-difference gradient estimate of a pure scalar function, one
/// coordinate at a time. Independent of [`Graph::backward`]; used as the
/// verification oracle for every analytic gradient in this crate.
pub fn finite_diff_gradient(f: &mut dyn FnMut(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
    let mut point = at.to_vec();
    let mut grad = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = point[i];
        point[i] = orig + step;
        let up = f(&point);
        point[i] = orig - step;
        let down = f(&point);
        point[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Relative error with an absolute floor, the standard gradient-check metric:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
