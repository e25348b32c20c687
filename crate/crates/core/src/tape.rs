//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its value and the data its
//! backward rule needs. Node indices only ever grow, so the tape is
//! topologically ordered by construction and a backward pass is a single
//! reverse sweep. Tapes are rebuilt for every training step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    /// Scalar whose gradient with respect to `x` was computed during the forward pass.
    ScalarWithGrad {
        x: Var,
        dx: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    /// Set when some leaf upstream requires a gradient.
    tracked: bool,
    /// Only leaves keep a persistent gradient slot.
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: BTreeMap<&'static str, u64>,
}

/// `(outer, len, inner)` strides for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for row-major `a: [m×k]`, `b: [n×k]`.
fn matmul_bt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` for row-major `a: [m×k]`, `b: [m×n]`.
fn matmul_at_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let spatial = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * spatial];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let q = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[q * spatial..(q + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let spatial = oh * ow;
    let mut dx = vec![0.0; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let q = (c * g.kernel + ky) * g.kernel + kx;
                let src = &dcols[q * spatial..(q + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(slot) => slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record and counter.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.counters.clear();
    }

    /// How many times the named operation or event was recorded.
    pub fn count(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub fn counters(&self) -> &BTreeMap<&'static str, u64> {
        &self.counters
    }

    /// Bumps a named counter without recording an operation.
    pub fn record_event(&mut self, name: &'static str) {
        *self.counters.entry(name).or_default() += 1;
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.value.clone()).unwrap_or_else(|_| Tensor::scalar(node.value[0]))
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        *self.counters.entry(name).or_default() += 1;
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    // Non-finite leaves are accepted; the first op that reads them reports it.
    fn leaf_with(&mut self, t: &Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_with(t, t.requires_grad())
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf_with(t, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf_with(t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"))),
        };
        let value = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let tracked = self.tracked(&[a, b]);
        self.push("matmul", vec![m, n], value, Op::MatMul(a, b), tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        self.push(name, shape, value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [d] {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} does not match rows of {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b);
        let value = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, b]);
        self.push("add_row", shape, value, Op::AddRow(x, b), tracked)
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(name, shape, value, op, tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::DegenerateInput("log"));
        }
        self.map("log", x, Op::Log(x), f64::ln)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim("transpose", format!("expected a matrix, got {s:?}"))),
        };
        let value = transpose_kernel(self.value(x), r, c);
        let tracked = self.tracked(&[x]);
        self.push("transpose", vec![c, r], value, Op::Transpose(x), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x), tracked)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::EmptyInput("concat")),
        };
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&first, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                value.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let tracked = self.tracked(inputs);
        self.push(
            "concat",
            shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            tracked,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            value.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let tracked = self.tracked(&[x]);
        self.push("narrow", out_shape, value, Op::Narrow { x, axis, start }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vals = self.value(x);
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let tracked = self.tracked(&[x]);
        self.push("mean", Vec::new(), vec![m], Op::Mean(x), tracked)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + r;
                let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (src[idx(t)] - max).exp();
                    value[idx(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    value[idx(t)] /= total;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        self.push("softmax", shape, value, Op::Softmax { x, axis }, tracked)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [d] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} {:?} does not match feature size {d}", self.shape(p)),
                ));
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let src = self.value(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                value[r * d + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(&[x, gain, bias]);
        self.push(
            "layer_norm",
            shape,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        )
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("l2_normalize", "scalar input"))?;
        let src = self.value(x);
        let mut norms = Vec::with_capacity(src.len() / d);
        let mut value = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateInput("l2_normalize"));
            }
            if !n.is_finite() {
                return Err(Error::NonFinite { op: "l2_normalize" });
            }
            norms.push(n);
            value.extend(row.iter().map(|v| v / n));
        }
        let tracked = self.tracked(&[x]);
        self.push("l2_normalize", shape, value, Op::L2Normalize { x, norms }, tracked)
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, K, K]` weights and optional `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let geom = match (xs, ws) {
            ([c, h, wd], [o, c2, k, k2]) if c == c2 && k == k2 && stride > 0 => ConvGeom {
                in_channels: *c,
                out_channels: *o,
                height: *h,
                width: *wd,
                kernel: *k,
                stride,
                padding,
            },
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("input {xs:?} incompatible with kernel {ws:?} (stride {stride})"),
                ))
            }
        };
        if geom.height + 2 * padding < geom.kernel || geom.width + 2 * padding < geom.kernel {
            return Err(Error::dim("conv2d", format!("input {xs:?} smaller than kernel {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), geom.out_channels),
                ));
            }
        }
        let cols = im2col(self.value(x), &geom);
        let spatial = geom.out_height() * geom.out_width();
        let mut value = matmul_kernel(self.value(w), &cols, geom.out_channels, geom.patch_len(), spatial);
        if let Some(b) = b {
            for (row, bias) in value.chunks_mut(spatial).zip(self.value(b)) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let shape = vec![geom.out_channels, geom.out_height(), geom.out_width()];
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        self.push(
            "conv2d",
            shape,
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            tracked,
        )
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `x`. The gradient is treated as locally constant.
    pub fn scalar_with_grad(&mut self, name: &'static str, x: Var, value: f64, dx: Vec<f64>) -> Result<Var> {
        if dx.len() != self.value(x).len() {
            return Err(Error::dim(
                name,
                format!("gradient of length {} for input {:?}", dx.len(), self.shape(x)),
            ));
        }
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = self.tracked(&[x]);
        self.push(name, Vec::new(), vec![value], Op::ScalarWithGrad { x, dx }, tracked)
    }

    /// Backpropagates from a scalar `loss`, adding into the gradient slots of
    /// every differentiable leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Vector-Jacobian product: backpropagates `seed` as the gradient of `out`.
    pub fn backward_with(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(Error::dim(
                "backward",
                format!("seed of length {} for output {:?}", seed.len(), self.shape(out)),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.backward_node(i, g, &mut adj);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: Vec<f64>, adj: &mut [Option<Vec<f64>>]) {
        if matches!(self.nodes[i].op, Op::Leaf) {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(slot) => slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v),
                None => node.grad = Some(g),
            }
            return;
        }
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let shp = |v: Var| nodes[v.0].shape.as_slice();
        let live = |v: Var| nodes[v.0].tracked;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if live(*a) {
                    accumulate(adj, *a, matmul_bt_kernel(&g, val(*b), m, n, k));
                }
                if live(*b) {
                    accumulate(adj, *b, matmul_at_kernel(val(*a), &g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if live(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if live(*b) {
                    accumulate(adj, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if live(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if live(*b) {
                    accumulate(adj, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    accumulate(adj, *a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if live(*b) {
                    accumulate(adj, *b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, b) => {
                if live(*b) {
                    let d = shp(*b)[0];
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    accumulate(adj, *b, db);
                }
                if live(*x) {
                    accumulate(adj, *x, g);
                }
            }
            Op::Scale(x, c) => accumulate(adj, *x, g.iter().map(|v| v * c).collect()),
            Op::Relu(x) => {
                let dx = g.iter().zip(val(*x)).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(adj, *x, dx);
            }
            Op::Exp(x) => {
                let dx = g.iter().zip(&node.value).map(|(gv, y)| gv * y).collect();
                accumulate(adj, *x, dx);
            }
            Op::Log(x) => {
                let dx = g.iter().zip(val(*x)).map(|(gv, xv)| gv / xv).collect();
                accumulate(adj, *x, dx);
            }
            Op::Transpose(x) => {
                let (r, c) = (shp(*x)[0], shp(*x)[1]);
                accumulate(adj, *x, transpose_kernel(&g, c, r));
            }
            Op::Reshape(x) => accumulate(adj, *x, g),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                let total = node.shape[*axis] * inner;
                for v in inputs {
                    let chunk = shp(*v)[*axis] * inner;
                    if live(*v) {
                        let mut dv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        accumulate(adj, *v, dv);
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(shp(*x), *axis);
                let len = node.shape[*axis];
                let mut dx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(adj, *x, dx);
            }
            Op::Sum(x) => accumulate(adj, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(adj, *x, vec![g[0] / n as f64; n]);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + r;
                        let dot: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..len {
                            dx[idx(t)] = y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = shp(*gain)[0];
                let gv = val(*gain);
                if live(*gain) || live(*bias) {
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dgain[j] += grow[j] * hrow[j];
                            dbias[j] += grow[j];
                        }
                    }
                    if live(*gain) {
                        accumulate(adj, *gain, dgain);
                    }
                    if live(*bias) {
                        accumulate(adj, *bias, dbias);
                    }
                }
                if live(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = is / d as f64 * (d as f64 * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    accumulate(adj, *x, dx);
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let spatial = geom.out_height() * geom.out_width();
                let (o, q) = (geom.out_channels, geom.patch_len());
                if let Some(b) = b.filter(|b| live(*b)) {
                    accumulate(adj, b, g.chunks(spatial).map(|row| row.iter().sum()).collect());
                }
                if live(*w) {
                    accumulate(adj, *w, matmul_bt_kernel(&g, cols, o, spatial, q));
                }
                if live(*x) {
                    let dcols = matmul_at_kernel(val(*w), &g, o, q, spatial);
                    accumulate(adj, *x, col2im(&dcols, geom));
                }
            }
            Op::ScalarWithGrad { x, dx } => {
                accumulate(adj, *x, dx.iter().map(|v| v * g[0]).collect());
            }
        }
    }
}
