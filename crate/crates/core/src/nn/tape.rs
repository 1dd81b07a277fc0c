//! Reverse-mode differentiation over a flat, append-only tape.
//!
//! Every primitive appends one node holding its output value. Node inputs
//! always have smaller indices than the node itself, so a single reverse
//! sweep visits the graph in topological order. A tape supports exactly one
//! backward sweep; build a fresh tape for the next forward pass.

use super::{NnError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Square(Var),
    Sum(Var),
    Index(Var, usize),
    MeanSpatial(Var),
    MeanTokens(Var),
    ScaleChannels(Var, Var),
    ScaleFeatures(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    AvgPool2(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    SoftmaxRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    Reshape(Var),
    Patchify { x: Var, patch: usize },
    CrossEntropy { logits: Var, label: usize },
    BernoulliLogProb { p: Var, bits: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Dense { .. } => "dense",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Index(..) => "index",
            Op::MeanSpatial(..) => "mean_spatial",
            Op::MeanTokens(..) => "mean_tokens",
            Op::ScaleChannels(..) => "scale_channels",
            Op::ScaleFeatures(..) => "scale_features",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(..) => "avg_pool2",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Patchify { .. } => "patchify",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BernoulliLogProb { .. } => "bernoulli_log_prob",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    // op-specific forward cache (layer-norm statistics, softmax of logits)
    aux: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    differentiated: bool,
}

fn shape_err(op: &str, msg: String) -> NnError {
    NnError::Shape(format!("{op}: {msg}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was on
    /// a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, aux: Vec<f64>) -> Result<Var, NnError> {
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(format!(
                "{} produced {} at node {}",
                op.name(),
                bad,
                self.nodes.len()
            )));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Dense { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleChannels(a, b)
            | Op::ScaleFeatures(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::ConcatCols(xs) | Op::Concat(xs) => xs.clone(),
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Index(x, _)
            | Op::MeanSpatial(x)
            | Op::MeanTokens(x)
            | Op::AvgPool2(x)
            | Op::SoftmaxRows(x)
            | Op::Reshape(x) => vec![*x],
            Op::Clamp { x, .. } | Op::SliceCols { x, .. } | Op::Patchify { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::BernoulliLogProb { p, .. } => vec![*p],
        }
    }

    fn check(&self, v: Var) -> Result<(), NnError> {
        if v.0 >= self.nodes.len() {
            return Err(NnError::Tape(format!("variable {} is not on this tape", v.0)));
        }
        if self.differentiated {
            return Err(NnError::Tape("tape already differentiated; start a new forward pass".into()));
        }
        Ok(())
    }

    /// Records a tensor as a leaf. Gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var, NnError> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var, NnError> {
        self.check(v)?;
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.constant(&shape, value)
    }

    /// `y = x Wᵀ + b` applied to the last axis of `x` (`[n_in]` or `[rows, n_in]`).
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(shape_err("dense", format!("input {xs:?} vs weights {ws:?}")));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [n_out] {
                return Err(shape_err("dense", format!("bias {:?} vs {n_out} outputs", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / n_in;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &xv[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wr = &wv[o * n_in..(o + 1) * n_in];
                out[r * n_out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                for o in 0..n_out {
                    out[r * n_out + o] += bv[o];
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        self.push(shape, out, Op::Dense { x, w, b }, vec![])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        self.push(vec![m, n], out, Op::MatMul(a, b), vec![])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?} is not a matrix")));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose(x), vec![])
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>), NnError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(s, v, Op::Add(a, b), vec![])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(s, v, Op::Sub(a, b), vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(s, v, Op::Mul(a, b), vec![])
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let v = self.value(x).iter().map(|v| f(*v)).collect();
        self.push(s, v, op, vec![])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NnError> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NnError> {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum(x), vec![])
    }

    /// Picks one element of a flat view as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var, NnError> {
        self.check(x)?;
        let n = self.value(x).len();
        if i >= n {
            return Err(shape_err("index", format!("{i} out of {n}")));
        }
        let v = self.value(x)[i];
        self.push(vec![], vec![v], Op::Index(x, i), vec![])
    }

    /// `[C, H, W] -> [C]` global average pool.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("mean_spatial", format!("{s:?} is not [C,H,W]")));
        }
        let hw = s[1] * s[2];
        let out = self.value(x).chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        self.push(vec![s[0]], out, Op::MeanSpatial(x), vec![])
    }

    /// `[T, D] -> [D]` mean over tokens.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(shape_err("mean_tokens", format!("{s:?} is not [T,D]")));
        }
        let (t, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        for row in self.value(x).chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        self.push(vec![d], out, Op::MeanTokens(x), vec![])
    }

    /// Multiplies `[C, H, W]` by a per-channel factor `[C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        self.check(x)?;
        self.check(s)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(s) != [xs[0]] {
            return Err(shape_err("scale_channels", format!("{xs:?} by {:?}", self.shape(s))));
        }
        let hw = xs[1] * xs[2];
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(hw)
            .zip(sv)
            .flat_map(|(c, f)| c.iter().map(move |v| v * f))
            .collect();
        self.push(xs, out, Op::ScaleChannels(x, s), vec![])
    }

    /// Multiplies the last axis of `x` (`[D]` or `[T, D]`) by a factor `[D]`.
    pub fn scale_features(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        self.check(x)?;
        self.check(s)?;
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if xs.is_empty() || xs.len() > 2 || self.shape(s) != [d] {
            return Err(shape_err("scale_features", format!("{xs:?} by {:?}", self.shape(s))));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(sv).map(|(v, f)| v * f))
            .collect();
        self.push(xs, out, Op::ScaleFeatures(x, s), vec![])
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    /// `x: [C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var, NnError> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("input {xs:?} vs kernel {ws:?}")));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv2d", format!("bias {:?} vs {c_out} channels", self.shape(b))));
            }
        }
        let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            if let Some(b) = b {
                plane.iter_mut().for_each(|v| *v = self.nodes[b.0].value[o]);
            }
            for c in 0..c_in {
                let src = &xv[c * h * wd..(c + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wk = wv[((o * c_in + c) * k + ky) * k + kx];
                        if wk == 0.0 {
                            continue;
                        }
                        conv_accumulate(plane, src, wk, ky, kx, pad, h, wd, oh, ow);
                    }
                }
            }
        }
        self.push(vec![c_out, oh, ow], out, Op::Conv2d { x, w, b, pad }, vec![])
    }

    /// 2×2 average pooling with stride 2 over `[C, H, W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(shape_err("avg_pool2", format!("{s:?} needs even spatial extents")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w;
                    let s = xv[base + 2 * y * w + 2 * xx]
                        + xv[base + 2 * y * w + 2 * xx + 1]
                        + xv[base + (2 * y + 1) * w + 2 * xx]
                        + xv[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[ch * oh * ow + y * ow + xx] = 0.25 * s;
                }
            }
        }
        self.push(vec![c, oh, ow], out, Op::AvgPool2(x), vec![])
    }

    /// Layer normalization over the last axis of `[D]` or `[T, D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if xs.is_empty() || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("{xs:?} with affine {:?}", self.shape(gamma))));
        }
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(self.value(x).len());
        let mut aux = Vec::new();
        for row in self.value(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..d {
                out.push((row[i] - mean) * rstd * g[i] + bt[i]);
            }
            aux.push(mean);
            aux.push(rstd);
        }
        self.push(xs, out, Op::LayerNorm { x, gamma, beta }, aux)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("softmax_rows", format!("{s:?} is not a matrix")));
        }
        let out = self.value(x).chunks(s[1]).flat_map(softmax).collect();
        self.push(s, out, Op::SoftmaxRows(x), vec![])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err("slice_cols", format!("{start}+{len} outside {s:?}")));
        }
        let out = self
            .value(x)
            .chunks(s[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(vec![s[0], len], out, Op::SliceCols { x, start }, vec![])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let rows = match xs.first() {
            Some(v) => self.shape(*v).first().copied().unwrap_or(0),
            None => return Err(shape_err("concat_cols", "no inputs".into())),
        };
        let mut widths = Vec::new();
        for v in xs {
            self.check(*v)?;
            let s = self.shape(*v);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", format!("{s:?} vs {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v)[r * w..(r + 1) * w]);
            }
        }
        self.push(vec![rows, total], out, Op::ConcatCols(xs.to_vec()), vec![])
    }

    /// Concatenates 1-D vectors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let mut out = Vec::new();
        for v in xs {
            self.check(*v)?;
            if self.shape(*v).len() != 1 {
                return Err(shape_err("concat", format!("{:?} is not a vector", self.shape(*v))));
            }
            out.extend_from_slice(self.value(*v));
        }
        let n = out.len();
        self.push(vec![n], out, Op::Concat(xs.to_vec()), vec![])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        self.check(x)?;
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} into {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        self.push(shape.to_vec(), v, Op::Reshape(x), vec![])
    }

    /// `[C, H, W] -> [T, C·p·p]` non-overlapping patches in row-major grid
    /// order; each token's features are ordered (channel, row, column).
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var, NnError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
            return Err(shape_err("patchify", format!("{s:?} not divisible by patch {patch}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / patch, w / patch);
        let dim = c * patch * patch;
        let xv = self.value(x);
        let mut out = vec![0.0; gh * gw * dim];
        for (t, f, src) in patch_index(c, h, w, patch) {
            out[t * dim + f] = xv[src];
        }
        self.push(vec![gh * gw, dim], out, Op::Patchify { x, patch }, vec![])
    }

    /// `-log softmax(logits)[label]`, stabilized by max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NnError> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 1 {
            return Err(shape_err("cross_entropy", format!("{s:?} is not a logit vector")));
        }
        if label >= s[0] {
            return Err(NnError::Label { label, n_classes: s[0] });
        }
        let z = self.value(logits);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let probs = softmax(z);
        self.push(vec![], vec![loss], Op::CrossEntropy { logits, label }, probs)
    }

    /// `Σ bit·ln p + (1 − bit)·ln(1 − p)` for fixed bits.
    pub fn bernoulli_log_prob(&mut self, p: Var, bits: &[f64]) -> Result<Var, NnError> {
        self.check(p)?;
        let pv = self.value(p);
        if pv.len() != bits.len() {
            return Err(shape_err("bernoulli_log_prob", format!("{} probs vs {} bits", pv.len(), bits.len())));
        }
        let lp = pv
            .iter()
            .zip(bits)
            .map(|(p, b)| b * p.ln() + (1.0 - b) * (1.0 - p).ln())
            .sum();
        self.push(vec![], vec![lp], Op::BernoulliLogProb { p, bits: bits.to_vec() }, vec![])
    }

    /// Reverse sweep from a scalar root. Allowed once per tape.
    pub fn backward(&mut self, root: Var) -> Result<(), NnError> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(NnError::Tape("backward called without a recorded forward pass".into()));
        }
        if self.differentiated {
            return Err(NnError::Tape("backward already ran on this tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err("backward", format!("root {:?} is not a scalar", self.nodes[root.0].shape)));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let g = match hi[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&self.nodes, i, g, lo);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite(format!(
                        "gradient {} at node {} ({})",
                        bad,
                        i,
                        self.nodes[i].op.name()
                    )));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of a slice.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_accumulate(
    plane: &mut [f64],
    src: &[f64],
    wk: f64,
    ky: usize,
    kx: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    // output (y, x) reads input (y + ky - pad, x + kx - pad)
    let y0 = pad.saturating_sub(ky);
    let y1 = (h + pad).saturating_sub(ky).min(oh);
    let x0 = pad.saturating_sub(kx);
    let x1 = (w + pad).saturating_sub(kx).min(ow);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let iy = y + ky - pad;
        let out_row = &mut plane[y * ow + x0..y * ow + x1];
        let in_row = &src[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
        for (o, i) in out_row.iter_mut().zip(in_row) {
            *o += wk * i;
        }
    }
}

fn patch_index(c: usize, h: usize, w: usize, p: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let gw = w / p;
    let gh = h / p;
    (0..gh * gw).flat_map(move |t| {
        let (gy, gx) = (t / gw, t % gw);
        (0..c * p * p).map(move |f| {
            let ch = f / (p * p);
            let py = (f / p) % p;
            let px = f % p;
            (t, f, ch * h * w + (gy * p + py) * w + gx * p + px)
        })
    })
}

fn slot<'a>(nodes: &[Node], lo: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(lo[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => {
            let n_in = nodes[w.0].shape[1];
            let n_out = nodes[w.0].shape[0];
            let rows = val(*x).len() / n_in;
            if let Some(gx) = slot(nodes, lo, *x) {
                let wv = val(*w);
                for r in 0..rows {
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        for k in 0..n_in {
                            gx[r * n_in + k] += go * wv[o * n_in + k];
                        }
                    }
                }
            }
            if let Some(gw) = slot(nodes, lo, *w) {
                let xv = val(*x);
                for r in 0..rows {
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        for k in 0..n_in {
                            gw[o * n_in + k] += go * xv[r * n_in + k];
                        }
                    }
                }
            }
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, lo, *b) {
                    for r in 0..rows {
                        for o in 0..n_out {
                            gb[o] += g[r * n_out + o];
                        }
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if let Some(ga) = slot(nodes, lo, *a) {
                let bv = val(*b);
                for r in 0..m {
                    for p in 0..k {
                        ga[r * k + p] += (0..n).map(|j| g[r * n + j] * bv[p * n + j]).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                let av = val(*a);
                for r in 0..m {
                    for p in 0..k {
                        let arp = av[r * k + p];
                        for j in 0..n {
                            gb[p * n + j] += arp * g[r * n + j];
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            if let Some(gx) = slot(nodes, lo, *x) {
                for r in 0..m {
                    for c in 0..n {
                        gx[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, lo, *v) {
                    gv.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, lo, *a) {
                let bv = val(*b);
                for ((o, d), y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += d * y;
                }
            }
            if let Some(gb) = slot(nodes, lo, *b) {
                let av = val(*a);
                for ((o, d), y) in gb.iter_mut().zip(g).zip(av) {
                    *o += d * y;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * c);
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                for ((o, d), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if *v > 0.0 {
                        *o += d;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                for ((o, d), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o += d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                for ((o, d), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *o += d * y * (1.0 - y);
                }
            }
        }
        Op::Log(x) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                for ((o, d), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += d / v;
                }
            }
        }
        Op::Clamp { x, lo: l, hi: h } => {
            if let Some(gx) = slot(nodes, lo, *x) {
                for ((o, d), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if *v > *l && *v < *h {
                        *o += d;
                    }
                }
            }
        }
        Op::Square(x) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                for ((o, d), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += 2.0 * d * v;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Index(x, k) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                gx[*k] += g[0];
            }
        }
        Op::MeanSpatial(x) => {
            let s = &nodes[x.0].shape;
            let hw = s[1] * s[2];
            if let Some(gx) = slot(nodes, lo, *x) {
                for (c, chunk) in gx.chunks_mut(hw).enumerate() {
                    let d = g[c] / hw as f64;
                    chunk.iter_mut().for_each(|o| *o += d);
                }
            }
        }
        Op::MeanTokens(x) => {
            let s = &nodes[x.0].shape;
            let (t, d) = (s[0], s[1]);
            if let Some(gx) = slot(nodes, lo, *x) {
                for row in gx.chunks_mut(d) {
                    for (o, gd) in row.iter_mut().zip(g) {
                        *o += gd / t as f64;
                    }
                }
            }
        }
        Op::ScaleChannels(x, s) => {
            let xs = &nodes[x.0].shape;
            let hw = xs[1] * xs[2];
            if let Some(gx) = slot(nodes, lo, *x) {
                let sv = val(*s);
                for (c, chunk) in gx.chunks_mut(hw).enumerate() {
                    for (o, d) in chunk.iter_mut().zip(&g[c * hw..(c + 1) * hw]) {
                        *o += d * sv[c];
                    }
                }
            }
            if let Some(gs) = slot(nodes, lo, *s) {
                let xv = val(*x);
                for (c, o) in gs.iter_mut().enumerate() {
                    *o += (c * hw..(c + 1) * hw).map(|j| g[j] * xv[j]).sum::<f64>();
                }
            }
        }
        Op::ScaleFeatures(x, s) => {
            let d = *nodes[x.0].shape.last().unwrap();
            if let Some(gx) = slot(nodes, lo, *x) {
                let sv = val(*s);
                for (j, o) in gx.iter_mut().enumerate() {
                    *o += g[j] * sv[j % d];
                }
            }
            if let Some(gs) = slot(nodes, lo, *s) {
                let xv = val(*x);
                for (j, (gj, xj)) in g.iter().zip(xv).enumerate() {
                    gs[j % d] += gj * xj;
                }
            }
        }
        Op::Conv2d { x, w, b, pad } => {
            let xs = &nodes[x.0].shape;
            let ws = &nodes[w.0].shape;
            let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
            let (c_out, k) = (ws[0], ws[2]);
            let (oh, ow) = (node.shape[1], node.shape[2]);
            let pad = *pad;
            if let Some(gx) = slot(nodes, lo, *x) {
                let wv = val(*w);
                for o in 0..c_out {
                    let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
                    for c in 0..c_in {
                        let dst = &mut gx[c * h * wd..(c + 1) * h * wd];
                        for ky in 0..k {
                            for kx in 0..k {
                                let wk = wv[((o * c_in + c) * k + ky) * k + kx];
                                if wk == 0.0 {
                                    continue;
                                }
                                conv_scatter(dst, gplane, wk, ky, kx, pad, h, wd, oh, ow);
                            }
                        }
                    }
                }
            }
            if let Some(gw) = slot(nodes, lo, *w) {
                let xv = val(*x);
                for o in 0..c_out {
                    let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
                    for c in 0..c_in {
                        let src = &xv[c * h * wd..(c + 1) * h * wd];
                        for ky in 0..k {
                            for kx in 0..k {
                                gw[((o * c_in + c) * k + ky) * k + kx] +=
                                    conv_correlate(gplane, src, ky, kx, pad, h, wd, oh, ow);
                            }
                        }
                    }
                }
            }
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, lo, *b) {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        *gbo += g[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::AvgPool2(x) => {
            let s = &nodes[x.0].shape;
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (h / 2, w / 2);
            if let Some(gx) = slot(nodes, lo, *x) {
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let d = 0.25 * g[ch * oh * ow + y * ow + xx];
                            let base = ch * h * w;
                            gx[base + 2 * y * w + 2 * xx] += d;
                            gx[base + 2 * y * w + 2 * xx + 1] += d;
                            gx[base + (2 * y + 1) * w + 2 * xx] += d;
                            gx[base + (2 * y + 1) * w + 2 * xx + 1] += d;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta } => {
            let d = *nodes[x.0].shape.last().unwrap();
            let xv = val(*x);
            let gam = val(*gamma);
            let rows = xv.len() / d;
            let xhat = |r: usize, j: usize| (xv[r * d + j] - node.aux[2 * r]) * node.aux[2 * r + 1];
            if let Some(gx) = slot(nodes, lo, *x) {
                for r in 0..rows {
                    let rstd = node.aux[2 * r + 1];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = g[r * d + j] * gam[j];
                        m1 += dxh;
                        m2 += dxh * xhat(r, j);
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = g[r * d + j] * gam[j];
                        gx[r * d + j] += rstd * (dxh - m1 - xhat(r, j) * m2);
                    }
                }
            }
            if let Some(gg) = slot(nodes, lo, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat(r, j);
                    }
                }
            }
            if let Some(gb) = slot(nodes, lo, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let n = node.shape[1];
            if let Some(gx) = slot(nodes, lo, *x) {
                for ((gr, yr), dst) in g.chunks(n).zip(node.value.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let n = nodes[x.0].shape[1];
            let len = node.shape[1];
            if let Some(gx) = slot(nodes, lo, *x) {
                for (r, gr) in g.chunks(len).enumerate() {
                    for (j, d) in gr.iter().enumerate() {
                        gx[r * n + start + j] += d;
                    }
                }
            }
        }
        Op::ConcatCols(xs) => {
            let total = node.shape[1];
            let mut off = 0;
            for v in xs {
                let w = nodes[v.0].shape[1];
                if let Some(gv) = slot(nodes, lo, *v) {
                    for (r, row) in gv.chunks_mut(w).enumerate() {
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += g[r * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::Concat(xs) => {
            let mut off = 0;
            for v in xs {
                let n = nodes[v.0].value.len();
                if let Some(gv) = slot(nodes, lo, *v) {
                    gv.iter_mut().zip(&g[off..off + n]).for_each(|(o, d)| *o += d);
                }
                off += n;
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, lo, *x) {
                gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
        }
        Op::Patchify { x, patch } => {
            let s = &nodes[x.0].shape;
            let dim = node.shape[1];
            if let Some(gx) = slot(nodes, lo, *x) {
                for (t, f, src) in patch_index(s[0], s[1], s[2], *patch) {
                    gx[src] += g[t * dim + f];
                }
            }
        }
        Op::CrossEntropy { logits, label } => {
            if let Some(gz) = slot(nodes, lo, *logits) {
                for (j, (o, p)) in gz.iter_mut().zip(&node.aux).enumerate() {
                    let onehot = if j == *label { 1.0 } else { 0.0 };
                    *o += g[0] * (p - onehot);
                }
            }
        }
        Op::BernoulliLogProb { p, bits } => {
            if let Some(gp) = slot(nodes, lo, *p) {
                for ((o, pv), b) in gp.iter_mut().zip(val(*p)).zip(bits) {
                    *o += g[0] * (b / pv - (1.0 - b) / (1.0 - pv));
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_scatter(
    dst: &mut [f64],
    gplane: &[f64],
    wk: f64,
    ky: usize,
    kx: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let y0 = pad.saturating_sub(ky);
    let y1 = (h + pad).saturating_sub(ky).min(oh);
    let x0 = pad.saturating_sub(kx);
    let x1 = (w + pad).saturating_sub(kx).min(ow);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let iy = y + ky - pad;
        let g_row = &gplane[y * ow + x0..y * ow + x1];
        let d_row = &mut dst[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
        for (d, gv) in d_row.iter_mut().zip(g_row) {
            *d += wk * gv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_correlate(
    gplane: &[f64],
    src: &[f64],
    ky: usize,
    kx: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> f64 {
    let y0 = pad.saturating_sub(ky);
    let y1 = (h + pad).saturating_sub(ky).min(oh);
    let x0 = pad.saturating_sub(kx);
    let x1 = (w + pad).saturating_sub(kx).min(ow);
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let iy = y + ky - pad;
        let g_row = &gplane[y * ow + x0..y * ow + x1];
        let s_row = &src[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
        acc += g_row.iter().zip(s_row).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap().with_grad()
    }

    #[test]
    fn dense_identity_and_zero_weights() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![3.0, 4.0]).unwrap();
        let w = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = t.dense(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0]);

        let w0 = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let b1 = t.constant(&[2], vec![1.0, 2.0]).unwrap();
        let y = t.dense(x, w0, Some(b1)).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn dense_hand_matmul() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![1.0, 1.0]).unwrap();
        let w = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = t.dense(x, w, None).unwrap();
        assert_eq!(t.value(y), &[3.0, 7.0]);
    }

    #[test]
    fn dense_rejects_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![1.0; 3]).unwrap();
        let w = t.constant(&[2, 2], vec![1.0; 4]).unwrap();
        assert!(matches!(t.dense(x, w, None), Err(NnError::Shape(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(&param(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 4.0, -7.0]));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&param(&[], vec![3.0]));
        let y = t.square(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(&param(&[], vec![3.0]));
        let y = t.square(x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(NnError::Tape(_))));
        // recording after the sweep is also refused
        assert!(t.square(x).is_err());
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut t = Tape::new();
        assert!(matches!(t.backward(Var(0)), Err(NnError::Tape(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut t = Tape::new();
        let z = t.constant(&[8], vec![0.3; 8]).unwrap();
        let l = t.cross_entropy(z, 5).unwrap();
        assert!((t.scalar(l) - 8f64.ln()).abs() < 1e-12);

        let z = t.constant(&[3], vec![0.0, 50.0, 0.0]).unwrap();
        let l = t.cross_entropy(z, 1).unwrap();
        assert!(t.scalar(l) < 1e-20);

        let z = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let l = t.cross_entropy(z, 2).unwrap();
        assert!((t.scalar(l) - 0.407_605_96).abs() < 1e-8);

        assert!(matches!(t.cross_entropy(z, 3), Err(NnError::Label { .. })));
    }

    #[test]
    fn non_finite_values_abort() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(t.log(x), Err(NnError::NonFinite(_))));
    }

    #[test]
    fn conv_single_pixel_center_tap() {
        // 1x1 input with zero padding: only the kernel centre sees the pixel.
        let mut t = Tape::new();
        let x = t.constant(&[1, 1, 1], vec![2.0]).unwrap();
        let w = t
            .constant(&[1, 1, 3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
            .unwrap();
        let b = t.constant(&[1], vec![0.5]).unwrap();
        let y = t.conv2d(x, w, Some(b), 1).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1]);
        assert_eq!(t.value(y), &[10.5]);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 700.0]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        for row in t.value(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn patchify_layout() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * 4 * 4).map(|v| v as f64).collect();
        let x = t.constant(&[2, 4, 4], data).unwrap();
        let p = t.patchify(x, 2).unwrap();
        assert_eq!(t.shape(p), &[4, 8]);
        // token 1 = grid (0, 1): channel 0 rows 0..2, cols 2..4, then channel 1
        assert_eq!(&t.value(p)[8..16], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }
}
