//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Operations evaluate eagerly and record themselves on a tape; tape order
//! is a topological order, so [`Graph::backward`] is a single reverse sweep
//! that accumulates each node's gradient exactly once. Parameter tensors are
//! borrowed into the graph as leaves, which is what lets many per-sample
//! graphs share one immutable parameter set across threads.
//!
//! The operator set is exactly what the conv → attention → MLP models need;
//! there is no broadcasting beyond row-bias addition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::{Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("token dimension {dim} is not divisible by {heads} heads")]
    HeadsDontDivide { dim: usize, heads: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("finite-difference epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("learning rate must be positive, got {0}")]
    NegativeLearningRate(f64),
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Pointwise nonlinearity applied after affine layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatVec(usize, usize),
    AddRowBias(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, offset: usize },
    Conv2d { input: usize, kernels: usize, bias: usize },
    Transpose(usize),
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Gather { x: usize, indices: Vec<usize> },
    MeanAll(usize),
}

#[derive(Debug)]
enum Payload<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Payload<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Payload::Owned(t) => t,
            Payload::Borrowed(t) => t,
        }
    }
}

struct Node<'p, T> {
    op: Op,
    value: Payload<'p, T>,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// The gradient for `id`, or zeros if the loss never touched it.
    pub fn take_or_zeros(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0].clone()))
    }
}

/// The tape. Parameter tensors live outside and are borrowed in.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Payload::Owned(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a borrowed tensor (a parameter or input) as a leaf.
    pub fn leaf(&mut self, tensor: &'p Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Payload::Borrowed(tensor),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an owned tensor that needs no gradient of its own.
    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(Op::Constant, tensor)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0].value.get()
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.value(id).data()[0]
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), AutodiffError> {
        match self.value(id).shape() {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add(a.0, b.0), Tensor::from_vec(shape, data)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Sub(a.0, b.0), Tensor::from_vec(shape, data)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul(a.0, b.0), Tensor::from_vec(shape, data)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        let f = T::from_f64(factor);
        let out = self.value(a).map(|v| v * f);
        Ok(self.push(Op::Scale(a.0, factor), out))
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] · [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = av[i * k + kk];
                let brow = &bv[kk * n..(kk + 1) * n];
                for j in 0..n {
                    row[j] = row[j] + aik * brow[j];
                }
            }
        }
        Ok(self.push(Op::MatMul(a.0, b.0), Tensor::from_vec(vec![m, n], out)))
    }

    /// `[m,n] · [n] → [m]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.dims2("matvec", w)?;
        if self.value(x).shape() != [n] {
            return Err(shape_err(
                "matvec",
                format!("[{m},{n}] · {:?}", self.value(x).shape()),
            ));
        }
        let (wv, xv) = (self.value(w).data(), self.value(x).data());
        let out = (0..m)
            .map(|i| {
                let row = &wv[i * n..(i + 1) * n];
                let mut acc = T::zero();
                for j in 0..n {
                    acc = acc + row[j] * xv[j];
                }
                acc
            })
            .collect();
        Ok(self.push(Op::MatVec(w.0, x.0), Tensor::from_vec(vec![m], out)))
    }

    /// Adds a length-n bias to every row of an `[m,n]` matrix.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.dims2("add_row_bias", x)?;
        if self.value(bias).shape() != [n] {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} for [{m},{n}]", self.value(bias).shape()),
            ));
        }
        let (xv, bv) = (self.value(x).data(), self.value(bias).data());
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        Ok(self.push(Op::AddRowBias(x.0, bias.0), Tensor::from_vec(vec![m, n], out)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(Op::Relu(a.0), out))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let one = T::one();
        let out = self.value(a).map(|v| one / (one + (-v).exp()));
        Ok(self.push(Op::Sigmoid(a.0), out))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let out = self.value(a).map(|v| v.tanh());
        Ok(self.push(Op::Tanh(a.0), out))
    }

    pub fn activate(&mut self, act: Activation, a: NodeId) -> Result<NodeId, AutodiffError> {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
            Activation::Linear => Ok(a),
        }
    }

    /// Row-wise softmax of an `[m,n]` matrix, max-shifted for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = T::zero();
            for j in 0..n {
                o[j] = (row[j] - max).exp();
                sum = sum + o[j];
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows(a.0), Tensor::from_vec(vec![m, n], out)))
    }

    /// Per-row layer normalization with learned gain and offset.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.dims2("layer_norm", x)?;
        for (name, id) in [("gain", gain), ("offset", offset)] {
            if self.value(id).shape() != [n] {
                return Err(shape_err(
                    "layer_norm",
                    format!("{name} {:?} for [{m},{n}]", self.value(id).shape()),
                ));
            }
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nt = T::from_f64(n as f64);
        let (xv, gv, ov) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(offset).data(),
        );
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / nt;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var / nt;
            let inv = T::one() / (var + eps).sqrt();
            let o = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o[j] = (row[j] - mean) * inv * gv[j] + ov[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                offset: offset.0,
            },
            Tensor::from_vec(vec![m, n], out),
        ))
    }

    /// Same-size zero-padded cross-correlation, stride 1: input `[C,H,W]`,
    /// kernels `[F,C,kh,kw]` with odd spatial extents, bias `[F]` → `[F,H,W]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (c, h, w) = match self.value(input).shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err("conv2d", format!("input {s:?}, expected [C,H,W]"))),
        };
        let (f, kc, kh, kw) = match self.value(kernels).shape() {
            [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
            s => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernels {s:?}, expected [F,C,kh,kw]"),
                ))
            }
        };
        if kc != c {
            return Err(shape_err("conv2d", format!("input has {c} channels, kernels take {kc}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if self.value(bias).shape() != [f] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} for {f} filters", self.value(bias).shape()),
            ));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let (iv, kv, bv) = (
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let mut out = vec![T::zero(); f * h * w];
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bv[fi];
                    for ci in 0..c {
                        for dy in 0..kh {
                            let iy = (y + dy).wrapping_sub(ph);
                            if iy >= h {
                                continue;
                            }
                            let irow = ci * h * w + iy * w;
                            let krow = ((fi * c + ci) * kh + dy) * kw;
                            for dx in 0..kw {
                                let ix = (x + dx).wrapping_sub(pw);
                                if ix < w {
                                    acc = acc + iv[irow + ix] * kv[krow + dx];
                                }
                            }
                        }
                    }
                    out[fi * h * w + y * w + x] = acc;
                }
            }
        }
        Ok(self.push(
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                bias: bias.0,
            },
            Tensor::from_vec(vec![f, h, w], out),
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.dims2("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose(a.0), Tensor::from_vec(vec![n, m], out)))
    }

    /// Columns `[start, start+len)` of an `[m,n]` matrix.
    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start + len > n {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} of [{m},{n}]", start + len),
            ));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        Ok(self.push(
            Op::SliceCols { x: a.0, start, len },
            Tensor::from_vec(vec![m, len], out),
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no parts".into()));
        }
        let (m, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2("concat_cols", p)?;
            if mp != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {mp}")));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &np) in parts.iter().zip(&widths) {
                let pv = self.value(p).data();
                out.extend_from_slice(&pv[i * np..(i + 1) * np]);
            }
        }
        Ok(self.push(
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            Tensor::from_vec(vec![m, total], out),
        ))
    }

    /// Same buffer under a new shape.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let out = t.reshaped(shape);
        Ok(self.push(Op::Reshape(a.0), out))
    }

    /// Picks elements of a flat vector: `out[j] = x[indices[j]]`.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, AutodiffError> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(shape_err("gather", format!("expected a vector, got {:?}", t.shape())));
        }
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= t.len() {
                return Err(shape_err("gather", format!("index {i} out of {}", t.len())));
            }
            out.push(t.data()[i]);
        }
        Ok(self.push(
            Op::Gather {
                x: a.0,
                indices: indices.to_vec(),
            },
            Tensor::from_vec(vec![indices.len()], out),
        ))
    }

    /// Mean over all elements, a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let mut acc = T::zero();
        for &v in t.data() {
            acc = acc + v;
        }
        let mean = acc / T::from_f64(t.len() as f64);
        Ok(self.push(Op::MeanAll(a.0), Tensor::scalar(mean)))
    }

    /// `activation(W·x + b)` for a vector input.
    pub fn dense(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        act: Activation,
    ) -> Result<NodeId, AutodiffError> {
        let wx = self.matvec(weight, x)?;
        let z = self.add(wx, bias)?;
        self.activate(act, z)
    }

    /// Standard multi-head scaled dot-product self-attention over row
    /// tokens: projections `X·W + b`, per-head scale `1/√(d/heads)`, heads
    /// concatenated, output projection applied.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        x: NodeId,
        wq: NodeId,
        bq: NodeId,
        wk: NodeId,
        bk: NodeId,
        wv: NodeId,
        bv: NodeId,
        wo: NodeId,
        bo: NodeId,
        heads: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (_, d) = self.dims2("multi_head_attention", x)?;
        if heads == 0 || d % heads != 0 {
            return Err(AutodiffError::HeadsDontDivide { dim: d, heads });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q0 = self.matmul(x, wq)?;
        let q = self.add_row_bias(q0, bq)?;
        let k0 = self.matmul(x, wk)?;
        let k = self.add_row_bias(k0, bk)?;
        let v0 = self.matmul(x, wv)?;
        let v = self.add_row_bias(v0, bv)?;

        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(kh)?;
            let logits = self.matmul(qh, kt)?;
            let scaled = self.scale(logits, scale)?;
            let weights = self.softmax_rows(scaled)?;
            parts.push(self.matmul(weights, vh)?);
        }
        let cat = self.concat_cols(&parts)?;
        let o0 = self.matmul(cat, wo)?;
        self.add_row_bias(o0, bo)
    }

    /// Mean squared error against a constant target vector.
    pub fn mse_to(&mut self, pred: NodeId, target: &[T]) -> Result<NodeId, AutodiffError> {
        let t = self.constant(Tensor::from_vec(vec![target.len()], target.to_vec()));
        let p = if self.value(pred).shape().len() == 1 {
            pred
        } else {
            let n = self.value(pred).len();
            self.reshape(pred, vec![n])?
        };
        let diff = self.sub(p, t)?;
        let sq = self.mul(diff, diff)?;
        self.mean_all(sq)
    }

    /// MSE over a masked subset of a flat prediction.
    pub fn mse_masked(
        &mut self,
        pred: NodeId,
        indices: &[usize],
        target: &[T],
    ) -> Result<NodeId, AutodiffError> {
        if indices.len() != target.len() {
            return Err(shape_err(
                "mse_masked",
                format!("{} indices vs {} targets", indices.len(), target.len()),
            ));
        }
        let picked = self.gather(pred, indices)?;
        self.mse_to(picked, target)
    }

    /// Distance of the closest pre-activation to a ReLU kink, if the graph
    /// contains any ReLU. Gradient checks redraw inputs that land too close.
    pub fn nearest_relu_kink(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &v in self.nodes[a].value.get().data() {
                    let d = v.to_f64().abs();
                    min = Some(min.map_or(d, |m: f64| m.min(d)));
                }
            }
        }
        min
    }

    /// Sign pattern of every ReLU pre-activation, in tape order. A finite
    /// difference whose two evaluations disagree here straddles a kink,
    /// where the comparison against the analytic gradient is ill-posed.
    pub fn relu_signs(&self) -> Vec<bool> {
        let mut signs = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &v in self.nodes[a].value.get().data() {
                    signs.push(v > T::zero());
                }
            }
        }
        signs
    }

    /// Reverse sweep from a finite scalar loss. Returns gradients for every
    /// node the loss depends on; untouched nodes read back as zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.data()[0].is_finite() {
            return Err(AutodiffError::NonFiniteValue(format!(
                "loss = {:?}",
                lt.data()[0]
            )));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                }
                op => self.propagate(op, id, &g, &mut grads),
            }
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.get().shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, op: &Op, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        // Accumulate into one input slot at a time; aliased inputs (x·x)
        // are handled correctly because each pass is a plain +=.
        macro_rules! acc {
            ($input:expr, |$d:ident| $body:expr) => {{
                let shape = self.nodes[$input].value.get().shape().to_vec();
                let $d: &mut Tensor<T> = grads[$input].get_or_insert_with(|| Tensor::zeros(shape));
                $body
            }};
        }

        let gv = g.data();
        match op {
            Op::Leaf | Op::Constant => unreachable!("handled by caller"),
            Op::Add(a, b) => {
                acc!(*a, |d| d.add_assign(g));
                acc!(*b, |d| d.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| d.add_assign(g));
                acc!(*b, |d| {
                    for (o, &x) in d.data_mut().iter_mut().zip(gv) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc!(*a, |d| {
                    let bv = self.nodes[*b].value.get().data();
                    for ((o, &x), &y) in d.data_mut().iter_mut().zip(gv).zip(bv) {
                        *o = *o + x * y;
                    }
                });
                acc!(*b, |d| {
                    let av = self.nodes[*a].value.get().data();
                    for ((o, &x), &y) in d.data_mut().iter_mut().zip(gv).zip(av) {
                        *o = *o + x * y;
                    }
                });
            }
            Op::Scale(a, factor) => {
                let f = T::from_f64(*factor);
                acc!(*a, |d| {
                    for (o, &x) in d.data_mut().iter_mut().zip(gv) {
                        *o = *o + x * f;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[*a].value.get().shape();
                    (s[0], s[1])
                };
                let n = self.nodes[*b].value.get().shape()[1];
                let av = self.nodes[*a].value.get().data();
                let bv = self.nodes[*b].value.get().data();
                // dA = G · Bᵀ
                acc!(*a, |d| {
                    let dd = d.data_mut();
                    for i in 0..m {
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let grow = &gv[i * n..(i + 1) * n];
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc = acc + grow[j] * brow[j];
                            }
                            dd[i * k + kk] = dd[i * k + kk] + acc;
                        }
                    }
                });
                // dB = Aᵀ · G
                acc!(*b, |d| {
                    let dd = d.data_mut();
                    for kk in 0..k {
                        for i in 0..m {
                            let aik = av[i * k + kk];
                            let grow = &gv[i * n..(i + 1) * n];
                            let drow = &mut dd[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                drow[j] = drow[j] + aik * grow[j];
                            }
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (m, n) = {
                    let s = self.nodes[*w].value.get().shape();
                    (s[0], s[1])
                };
                let wv = self.nodes[*w].value.get().data();
                let xv = self.nodes[*x].value.get().data();
                acc!(*w, |d| {
                    let dd = d.data_mut();
                    for i in 0..m {
                        let gi = gv[i];
                        let drow = &mut dd[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] = drow[j] + gi * xv[j];
                        }
                    }
                });
                acc!(*x, |d| {
                    let dd = d.data_mut();
                    for i in 0..m {
                        let gi = gv[i];
                        let wrow = &wv[i * n..(i + 1) * n];
                        for j in 0..n {
                            dd[j] = dd[j] + gi * wrow[j];
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let n = self.nodes[*b].value.get().len();
                acc!(*x, |d| d.add_assign(g));
                acc!(*b, |d| {
                    let dd = d.data_mut();
                    for (i, &v) in gv.iter().enumerate() {
                        dd[i % n] = dd[i % n] + v;
                    }
                });
            }
            Op::Relu(a) => {
                acc!(*a, |d| {
                    let av = self.nodes[*a].value.get().data();
                    for ((o, &x), &v) in d.data_mut().iter_mut().zip(gv).zip(av) {
                        if v > T::zero() {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc!(*a, |d| {
                    let yv = self.nodes[id].value.get().data();
                    for ((o, &x), &y) in d.data_mut().iter_mut().zip(gv).zip(yv) {
                        *o = *o + x * y * (T::one() - y);
                    }
                });
            }
            Op::Tanh(a) => {
                acc!(*a, |d| {
                    let yv = self.nodes[id].value.get().data();
                    for ((o, &x), &y) in d.data_mut().iter_mut().zip(gv).zip(yv) {
                        *o = *o + x * (T::one() - y * y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = {
                    let s = self.nodes[id].value.get().shape();
                    (s[0], s[1])
                };
                acc!(*a, |d| {
                    let yv = self.nodes[id].value.get().data();
                    let dd = d.data_mut();
                    for i in 0..m {
                        let yr = &yv[i * n..(i + 1) * n];
                        let gr = &gv[i * n..(i + 1) * n];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot = dot + gr[j] * yr[j];
                        }
                        let dr = &mut dd[i * n..(i + 1) * n];
                        for j in 0..n {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, offset } => {
                let xt = self.nodes[*x].value.get();
                let (m, n) = (xt.shape()[0], xt.shape()[1]);
                let xv = xt.data();
                let gainv = self.nodes[*gain].value.get().data();
                let eps = T::from_f64(LAYER_NORM_EPS);
                let nt = T::from_f64(n as f64);

                // Recompute per-row statistics and x̂ from the saved input.
                let mut xhat = vec![T::zero(); m * n];
                let mut inv_sigma = vec![T::zero(); m];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let mut mean = T::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean / nt;
                    let mut var = T::zero();
                    for &v in row {
                        var = var + (v - mean) * (v - mean);
                    }
                    var = var / nt;
                    let inv = T::one() / (var + eps).sqrt();
                    inv_sigma[i] = inv;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv;
                    }
                }

                acc!(*gain, |d| {
                    let dd = d.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            dd[j] = dd[j] + gv[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc!(*offset, |d| {
                    let dd = d.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            dd[j] = dd[j] + gv[i * n + j];
                        }
                    }
                });
                acc!(*x, |d| {
                    let dd = d.data_mut();
                    for i in 0..m {
                        let gr = &gv[i * n..(i + 1) * n];
                        let xr = &xhat[i * n..(i + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dxhat = gr[j] * gainv[j];
                            m1 = m1 + dxhat;
                            m2 = m2 + dxhat * xr[j];
                        }
                        m1 = m1 / nt;
                        m2 = m2 / nt;
                        let dr = &mut dd[i * n..(i + 1) * n];
                        for j in 0..n {
                            let dxhat = gr[j] * gainv[j];
                            dr[j] = dr[j] + inv_sigma[i] * (dxhat - m1 - xr[j] * m2);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
            } => {
                let ishape = self.nodes[*input].value.get().shape().to_vec();
                let kshape = self.nodes[*kernels].value.get().shape().to_vec();
                let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (f, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let iv = self.nodes[*input].value.get().data();
                let kv = self.nodes[*kernels].value.get().data();

                acc!(*bias, |d| {
                    let dd = d.data_mut();
                    for fi in 0..f {
                        let mut acc = T::zero();
                        for &v in &gv[fi * h * w..(fi + 1) * h * w] {
                            acc = acc + v;
                        }
                        dd[fi] = dd[fi] + acc;
                    }
                });

                let mut dker = vec![T::zero(); kv.len()];
                let mut dinp = vec![T::zero(); iv.len()];
                for fi in 0..f {
                    for y in 0..h {
                        for x in 0..w {
                            let go = gv[fi * h * w + y * w + x];
                            for ci in 0..c {
                                for dy in 0..kh {
                                    let iy = (y + dy).wrapping_sub(ph);
                                    if iy >= h {
                                        continue;
                                    }
                                    let irow = ci * h * w + iy * w;
                                    let krow = ((fi * c + ci) * kh + dy) * kw;
                                    for dx in 0..kw {
                                        let ix = (x + dx).wrapping_sub(pw);
                                        if ix < w {
                                            dker[krow + dx] = dker[krow + dx] + go * iv[irow + ix];
                                            dinp[irow + ix] = dinp[irow + ix] + go * kv[krow + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc!(*kernels, |d| {
                    for (o, &v) in d.data_mut().iter_mut().zip(&dker) {
                        *o = *o + v;
                    }
                });
                acc!(*input, |d| {
                    for (o, &v) in d.data_mut().iter_mut().zip(&dinp) {
                        *o = *o + v;
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.nodes[*a].value.get().shape().to_vec();
                let (m, n) = (s[0], s[1]);
                acc!(*a, |d| {
                    let dd = d.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            dd[i * n + j] = dd[i * n + j] + gv[j * m + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let n = self.nodes[*x].value.get().shape()[1];
                let m = self.nodes[*x].value.get().shape()[0];
                acc!(*x, |d| {
                    let dd = d.data_mut();
                    for i in 0..m {
                        for t in 0..*len {
                            dd[i * n + start + t] = dd[i * n + start + t] + gv[i * len + t];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[parts[0]].value.get().shape()[0];
                let total: usize = parts
                    .iter()
                    .map(|&p| self.nodes[p].value.get().shape()[1])
                    .sum();
                let mut offset = 0usize;
                for &p in parts {
                    let np = self.nodes[p].value.get().shape()[1];
                    acc!(p, |d| {
                        let dd = d.data_mut();
                        for i in 0..m {
                            for j in 0..np {
                                dd[i * np + j] = dd[i * np + j] + gv[i * total + offset + j];
                            }
                        }
                    });
                    offset += np;
                }
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.get().shape().to_vec();
                let gr = g.reshaped(shape);
                acc!(*a, |d| d.add_assign(&gr));
            }
            Op::Gather { x, indices } => {
                acc!(*x, |d| {
                    let dd = d.data_mut();
                    for (j, &i) in indices.iter().enumerate() {
                        dd[i] = dd[i] + gv[j];
                    }
                });
            }
            Op::MeanAll(a) => {
                let len = self.nodes[*a].value.get().len();
                let share = gv[0] / T::from_f64(len as f64);
                acc!(*a, |d| {
                    for o in d.data_mut().iter_mut() {
                        *o = *o + share;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn square_has_linear_gradient() {
        let x = t(vec![1], vec![3.0]);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.mean_all(sq).unwrap();
        assert_eq!(g.scalar_value(loss), 9.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(xn).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let mut g = Graph::new();
        let (an, bn) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(an, bn).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        let mut g = Graph::new();
        let (an, bn) = (g.leaf(&a), g.leaf(&b));
        assert!(matches!(
            g.matmul(an, bn),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dense_identity_and_zero_cases() {
        let x = t(vec![3], vec![1.0, -2.0, 3.0]);
        let eye = t(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zeros_w = t(vec![3, 3], vec![0.0; 9]);
        let zeros_b = t(vec![3], vec![0.0; 3]);

        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let eyen = g.leaf(&eye);
        let zwn = g.leaf(&zeros_w);
        let zbn = g.leaf(&zeros_b);

        let lin = g.dense(xn, eyen, zbn, Activation::Linear).unwrap();
        assert_eq!(g.value(lin).data(), x.data());

        let relu = g.dense(xn, zwn, zbn, Activation::Relu).unwrap();
        assert_eq!(g.value(relu).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn activation_values_at_zero() {
        let x = t(vec![1], vec![0.0]);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let s = g.sigmoid(xn).unwrap();
        let th = g.tanh(xn).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(th).data(), &[0.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let x = t(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let y = g.softmax_rows(xn).unwrap();
        for i in 0..2 {
            let row = &g.value(y).data()[i * 3..(i + 1) * 3];
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let input = t(vec![1, 4, 5], (0..20).map(|i| i as f64 * 0.1).collect());
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // center tap
        let kernels = t(vec![1, 1, 3, 3], kdata);
        let bias = t(vec![1], vec![0.0]);
        let mut g = Graph::new();
        let (i, k, b) = (g.leaf(&input), g.leaf(&kernels), g.leaf(&bias));
        let out = g.conv2d(i, k, b).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 4, 5]);
        assert_eq!(g.value(out).data(), input.data());
    }

    #[test]
    fn conv_zero_kernels_emit_bias() {
        let input = t(vec![2, 3, 3], vec![0.7; 18]);
        let kernels = t(vec![2, 2, 3, 3], vec![0.0; 36]);
        let bias = t(vec![2], vec![1.5, -0.5]);
        let mut g = Graph::new();
        let (i, k, b) = (g.leaf(&input), g.leaf(&kernels), g.leaf(&bias));
        let out = g.conv2d(i, k, b).unwrap();
        assert!(g.value(out).data()[..9].iter().all(|&v| v == 1.5));
        assert!(g.value(out).data()[9..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn conv_preserves_spatial_extent_over_shape_grid() {
        for &(c, h, w) in &[(1usize, 3usize, 3usize), (2, 5, 4), (3, 7, 7), (10, 10, 10)] {
            for &(f, kh, kw) in &[(1usize, 1usize, 1usize), (2, 3, 3), (4, 5, 3)] {
                let input = Tensor::<f64>::zeros(vec![c, h, w]);
                let kernels = Tensor::<f64>::zeros(vec![f, c, kh, kw]);
                let bias = Tensor::<f64>::zeros(vec![f]);
                let mut g = Graph::new();
                let (i, k, b) = (g.leaf(&input), g.leaf(&kernels), g.leaf(&bias));
                let out = g.conv2d(i, k, b).unwrap();
                assert_eq!(g.value(out).shape(), &[f, h, w]);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernels() {
        let input = Tensor::<f64>::zeros(vec![1, 4, 4]);
        let kernels = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let bias = Tensor::<f64>::zeros(vec![1]);
        let mut g = Graph::new();
        let (i, k, b) = (g.leaf(&input), g.leaf(&kernels), g.leaf(&bias));
        assert!(g.conv2d(i, k, b).is_err());
    }

    #[test]
    fn attention_single_token_reduces_to_value_path() {
        // With one token the softmax weight is the scalar 1, so the output
        // is Wo·(Wv·x + bv) + bo regardless of Q and K.
        let d = 4;
        let x = t(vec![1, d], vec![0.3, -0.2, 0.5, 0.9]);
        let mk = |seed: u64| {
            let mut v = Vec::new();
            let mut s = seed;
            for _ in 0..d * d {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.push(((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5);
            }
            t(vec![d, d], v)
        };
        let (wq, wk, wv, wo) = (mk(1), mk(2), mk(3), mk(4));
        let zb = t(vec![d], vec![0.0; d]);
        let bv = t(vec![d], vec![0.1, 0.2, -0.1, 0.0]);
        let bo = t(vec![d], vec![-0.3, 0.0, 0.2, 0.1]);

        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let ids = [
            g.leaf(&wq),
            g.leaf(&zb),
            g.leaf(&wk),
            g.leaf(&zb),
            g.leaf(&wv),
            g.leaf(&bv),
            g.leaf(&wo),
            g.leaf(&bo),
        ];
        let out = g
            .multi_head_attention(
                xn, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7], 2,
            )
            .unwrap();

        let mut g2 = Graph::new();
        let xr = g2.leaf(&x);
        let (wvn, bvn, won, bon) = (g2.leaf(&wv), g2.leaf(&bv), g2.leaf(&wo), g2.leaf(&bo));
        let v0 = g2.matmul(xr, wvn).unwrap();
        let v = g2.add_row_bias(v0, bvn).unwrap();
        let o0 = g2.matmul(v, won).unwrap();
        let expect = g2.add_row_bias(o0, bon).unwrap();

        for (a, b) in g.value(out).iter().zip(g2.value(expect).iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_is_row_equivariant() {
        let (tks, d, heads) = (5usize, 6usize, 3usize);
        let mut s = 99u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let x = t(vec![tks, d], (0..tks * d).map(|_| next()).collect());
        let params: Vec<Tensor<f64>> = (0..4)
            .map(|_| t(vec![d, d], (0..d * d).map(|_| next()).collect()))
            .collect();
        let biases: Vec<Tensor<f64>> = (0..4)
            .map(|_| t(vec![d], (0..d).map(|_| next()).collect()))
            .collect();

        let perm = [3usize, 0, 4, 1, 2];
        let mut xp_data = vec![0.0; tks * d];
        for (new_row, &old_row) in perm.iter().enumerate() {
            xp_data[new_row * d..(new_row + 1) * d]
                .copy_from_slice(&x.data()[old_row * d..(old_row + 1) * d]);
        }
        let xp = t(vec![tks, d], xp_data);

        let run = |input: &Tensor<f64>| {
            let mut g = Graph::new();
            let xn = g.leaf(input);
            let p: Vec<NodeId> = params.iter().map(|t| g.leaf(t)).collect();
            let b: Vec<NodeId> = biases.iter().map(|t| g.leaf(t)).collect();
            let out = g
                .multi_head_attention(xn, p[0], b[0], p[1], b[1], p[2], b[2], p[3], b[3], heads)
                .unwrap();
            g.value(out).data().to_vec()
        };

        let base = run(&x);
        let permuted = run(&xp);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..d {
                let a = permuted[new_row * d + j];
                let b = base[old_row * d + j];
                assert!((a - b).abs() < 1e-12, "row {new_row}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let x = Tensor::<f64>::zeros(vec![2, 10]);
        let w = Tensor::<f64>::zeros(vec![10, 10]);
        let b = Tensor::<f64>::zeros(vec![10]);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let wn = g.leaf(&w);
        let bn = g.leaf(&b);
        assert!(matches!(
            g.multi_head_attention(xn, wn, bn, wn, bn, wn, bn, wn, bn, 7),
            Err(AutodiffError::HeadsDontDivide { dim: 10, heads: 7 })
        ));
    }

    #[test]
    fn mse_at_target_has_zero_gradients() {
        let x = t(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let w = t(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = t(vec![2], vec![0.0, 0.0]);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
        let y = g.dense(xn, wn, bn, Activation::Linear).unwrap();
        let target: Vec<f64> = g.value(y).data().to_vec();
        let loss = g.mse_to(y, &target).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(wn).unwrap().iter().all(|&v| v == 0.0));
        assert!(grads.get(bn).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_leaf_reads_back_as_zeros() {
        let x = t(vec![2], vec![1.0, 2.0]);
        let unused = t(vec![3], vec![5.0, 6.0, 7.0]);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let un = g.leaf(&unused);
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let mut grads = g.backward(loss).unwrap();
        assert!(grads.get(un).is_none());
        assert_eq!(grads.take_or_zeros(un).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = t(vec![2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        assert!(matches!(
            g.backward(xn),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let x = t(vec![1], vec![f64::INFINITY]);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        assert!(matches!(
            g.backward(xn),
            Err(AutodiffError::NonFiniteValue(_))
        ));
    }
}
