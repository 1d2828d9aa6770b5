//! Dense tensors, a tape of executed operations, and reverse-mode
//! differentiation over that tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Leaves are
//! inserted with [`Graph::leaf`]; every operator appends one node whose inputs
//! precede it, so the node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Result, WsdlError};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(WsdlError::shape("tensor", format!("zero extent in {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(WsdlError::shape(
                "tensor",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn is_grad_required(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() || dims.contains(&0) {
            return Err(WsdlError::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        self.grad = None;
        Ok(self)
    }

    fn accumulate_grad(&mut self, adjoint: &[f64]) {
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(adjoint).for_each(|(g, a)| *g += a),
            None => self.grad = Some(adjoint.to_vec()),
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(WsdlError::NonFinite { op })
    }
}

/// `c = a·b + beta·c` for row-major operands; `a` is `m×k`, `b` is `k×n`.
/// Transposed operands are read through swapped strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the index ranges implied by the dims and strides.
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

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], image: &mut [f64]) {
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
    },
    Reshape(Var),
    ChannelsLast(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernels, bias, ..
            } => vec![*input, *kernels, *bias],
            Op::Linear { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Relu(v) | Op::GlobalAvgPool(v) | Op::Softmax(v) | Op::Reshape(v) | Op::ChannelsLast(v) | Op::Sum(v) => {
                vec![*v]
            }
            Op::MaxPool2 { input, .. } | Op::GatherRows { input, .. } | Op::Scale { input, .. } => vec![*input],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::SmoothL1 { pred, target } => vec![*pred, *target],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Clamp applied inside [`Graph::cross_entropy`] so `-ln(0)` never occurs.
pub const CE_EPSILON: f64 = 1e-12;

/// Execution tape. Values live in the graph; operators return [`Var`]s.
#[derive(Debug, Default, Clone)]
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad;
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, dims: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(op_name, &data)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        };
        Ok(self.push(value, op, needs_grad))
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[K,C,kh,kw]` kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let kd = self.dims(kernels).to_vec();
        let bd = self.dims(bias).to_vec();
        if xd.len() != 4 || kd.len() != 4 {
            return Err(WsdlError::shape(
                "conv2d",
                format!("expected rank-4 input and kernels, got {xd:?} and {kd:?}"),
            ));
        }
        if stride == 0 {
            return Err(WsdlError::shape("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (k, kc, kh, kw) = (kd[0], kd[1], kd[2], kd[3]);
        if kc != c {
            return Err(WsdlError::shape(
                "conv2d",
                format!("input has {c} channels but kernels expect {kc}"),
            ));
        }
        if bd != [k] {
            return Err(WsdlError::shape(
                "conv2d",
                format!("bias dims {bd:?} do not match {k} kernels"),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(WsdlError::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * k * ncols];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * ncols]
        };
        {
            let x = self.value(input).data();
            let kern = self.value(kernels).data();
            let b = self.value(bias).data();
            for s in 0..n {
                let image = &x[s * c * h * w..(s + 1) * c * h * w];
                let dst = &mut out[s * k * ncols..(s + 1) * k * ncols];
                for (ki, row) in dst.chunks_mut(ncols).enumerate() {
                    row.fill(b[ki]);
                }
                let src: &[f64] = if geom.is_pointwise() {
                    image
                } else {
                    geom.im2col(image, &mut cols);
                    &cols
                };
                gemm(k, rows, ncols, kern, false, src, false, 1.0, dst);
            }
        }
        self.record(
            "conv2d",
            vec![n, k, geom.out_h, geom.out_w],
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let dims = v.dims().to_vec();
        self.record("relu", dims, data, Op::Relu(x))
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first cell in
    /// row-major order within the window.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 {
            return Err(WsdlError::shape("max_pool2d", format!("expected rank 4, got {d:?}")));
        }
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(WsdlError::shape(
                "max_pool2d",
                format!("spatial extents {h}x{w} must be even"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        self.record("max_pool2d", vec![n, c, oh, ow], out, Op::MaxPool2 { input: x, argmax })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 {
            return Err(WsdlError::shape(
                "global_avg_pool",
                format!("expected rank 4, got {d:?}"),
            ));
        }
        let area = d[2] * d[3];
        let out = self
            .value(x)
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        self.record("global_avg_pool", vec![d[0], d[1]], out, Op::GlobalAvgPool(x))
    }

    /// `x·W + b` with `x: [N,D]`, `W: [D,E]`, `b: [E]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(weight).to_vec();
        let bd = self.dims(bias).to_vec();
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[0] || bd != [wd[1]] {
            return Err(WsdlError::shape(
                "linear",
                format!("x {xd:?}, weight {wd:?}, bias {bd:?} are incompatible"),
            ));
        }
        let (n, din, e) = (xd[0], xd[1], wd[1]);
        let b = self.value(bias).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        gemm(
            n,
            din,
            e,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            false,
            1.0,
            &mut out,
        );
        self.record("linear", vec![n, e], out, Op::Linear { x, weight, bias })
    }

    /// Row-wise softmax over the last axis of a `[N,C]` tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let d = self.dims(logits).to_vec();
        if d.len() != 2 {
            return Err(WsdlError::shape("softmax", format!("expected rank 2, got {d:?}")));
        }
        let mut out = self.value(logits).data().to_vec();
        for row in out.chunks_mut(d[1]) {
            softmax_in_place(row);
        }
        self.record("softmax", d, out, Op::Softmax(logits))
    }

    /// Mean over rows of `-ln(max(p_label, ε))`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let d = self.dims(probs).to_vec();
        if d.len() != 2 || d[0] != labels.len() {
            return Err(WsdlError::shape(
                "cross_entropy",
                format!("probs {d:?} vs {} labels", labels.len()),
            ));
        }
        let classes = d[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(WsdlError::LabelOutOfRange { label: bad, classes });
        }
        let p = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p[i * classes + l].max(CE_EPSILON).ln())
            .sum();
        self.record(
            "cross_entropy",
            vec![1],
            vec![total / labels.len() as f64],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Sum of elementwise smooth L1 of `pred - target`; the caller divides by
    /// its own normalizer.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.dims(pred) != self.dims(target) {
            return Err(WsdlError::shape(
                "smooth_l1",
                format!("pred {:?} vs target {:?}", self.dims(pred), self.dims(target)),
            ));
        }
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| smooth_l1_value(p - t))
            .sum();
        self.record("smooth_l1", vec![1], vec![total], Op::SmoothL1 { pred, target })
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let numel: usize = dims.iter().product();
        if numel != self.value(x).numel() || dims.contains(&0) {
            return Err(WsdlError::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        self.record("reshape", dims.to_vec(), data, Op::Reshape(x))
    }

    /// `[N,C,H,W]` to `[N·H·W, C]`, rows ordered by sample, then row, then column.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 {
            return Err(WsdlError::shape("channels_last", format!("expected rank 4, got {d:?}")));
        }
        let (n, c, area) = (d[0], d[1], d[2] * d[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..area {
                    out[(s * area + p) * c + ch] = src[(s * c + ch) * area + p];
                }
            }
        }
        self.record("channels_last", vec![n * area, c], out, Op::ChannelsLast(x))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 2 {
            return Err(WsdlError::shape("gather_rows", format!("expected rank 2, got {d:?}")));
        }
        if rows.is_empty() {
            return Err(WsdlError::shape("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= d[0]) {
            return Err(WsdlError::shape(
                "gather_rows",
                format!("row {bad} out of range for {} rows", d[0]),
            ));
        }
        let src = self.value(x).data();
        let width = d[1];
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        self.record(
            "gather_rows",
            vec![rows.len(), width],
            out,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * factor).collect();
        let dims = v.dims().to_vec();
        self.record("scale", dims, data, Op::Scale { input: x, factor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(WsdlError::shape(
                "add",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let dims = self.dims(a).to_vec();
        self.record("add", dims, data, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(WsdlError::shape(
                "mul",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let dims = self.dims(a).to_vec();
        self.record("mul", dims, data, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.record("sum", vec![1], vec![total], Op::Sum(x))
    }

    /// Propagate adjoints from a scalar `loss` back to every leaf that
    /// requires a gradient. Gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_dims = self.dims(loss).to_vec();
        if loss_dims.iter().product::<usize>() != 1 {
            return Err(WsdlError::NonScalarLoss(loss_dims));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if self.nodes[idx].value.requires_grad {
                    self.nodes[idx].value.accumulate_grad(&adj);
                }
                continue;
            }
            let contributions = self.adjoint_contributions(idx, &adj);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut adjoints[var.0] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint_contributions(&self, idx: usize, adj: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            } => {
                let xd = self.dims(*input);
                let n = xd[0];
                let k = self.dims(*kernels)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let image_len = geom.channels * geom.height * geom.width;
                let x = self.value(*input).data();
                let kern = self.value(*kernels).data();
                let want_x = self.needs(*input);
                let want_k = self.needs(*kernels);
                let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut dk = vec![0.0; if want_k { kern.len() } else { 0 }];
                let mut db = vec![0.0; k];
                let mut cols = vec![0.0; rows * ncols];
                for s in 0..n {
                    let dy = &adj[s * k * ncols..(s + 1) * k * ncols];
                    for (ki, row) in dy.chunks(ncols).enumerate() {
                        db[ki] += row.iter().sum::<f64>();
                    }
                    if want_k {
                        let image = &x[s * image_len..(s + 1) * image_len];
                        let src: &[f64] = if geom.is_pointwise() {
                            image
                        } else {
                            geom.im2col(image, &mut cols);
                            &cols
                        };
                        gemm(k, ncols, rows, dy, false, src, true, 1.0, &mut dk);
                    }
                    if want_x {
                        let dst = &mut dx[s * image_len..(s + 1) * image_len];
                        if geom.is_pointwise() {
                            gemm(rows, k, ncols, kern, true, dy, false, 1.0, dst);
                        } else {
                            gemm(rows, k, ncols, kern, true, dy, false, 0.0, &mut cols);
                            geom.col2im_add(&cols, dst);
                        }
                    }
                }
                if want_x {
                    out.push((*input, dx));
                }
                if want_k {
                    out.push((*kernels, dk));
                }
                out.push((*bias, db));
            }
            Op::Relu(x) => {
                let src = self.value(*x).data();
                let g = src
                    .iter()
                    .zip(adj)
                    .map(|(&v, &a)| if v > 0.0 { a } else { 0.0 })
                    .collect();
                out.push((*x, g));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut g = vec![0.0; self.value(*input).numel()];
                for (&src, &a) in argmax.iter().zip(adj) {
                    g[src] += a;
                }
                out.push((*input, g));
            }
            Op::GlobalAvgPool(x) => {
                let d = self.dims(*x);
                let area = d[2] * d[3];
                let g = adj
                    .iter()
                    .flat_map(|&a| std::iter::repeat_n(a / area as f64, area))
                    .collect();
                out.push((*x, g));
            }
            Op::Linear { x, weight, bias } => {
                let xd = self.dims(*x);
                let (n, din) = (xd[0], xd[1]);
                let e = self.dims(*weight)[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, e, din, adj, false, self.value(*weight).data(), true, 0.0, &mut dx);
                    out.push((*x, dx));
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; din * e];
                    gemm(din, n, e, self.value(*x).data(), true, adj, false, 0.0, &mut dw);
                    out.push((*weight, dw));
                }
                let mut db = vec![0.0; e];
                for row in adj.chunks(e) {
                    db.iter_mut().zip(row).for_each(|(d, a)| *d += a);
                }
                out.push((*bias, db));
            }
            Op::Softmax(x) => {
                let c = node.value.dims()[1];
                let y = node.value.data();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), ar) in g.chunks_mut(c).zip(y.chunks(c)).zip(adj.chunks(c)) {
                    let dot: f64 = yr.iter().zip(ar).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gr[j] = yr[j] * (ar[j] - dot);
                    }
                }
                out.push((*x, g));
            }
            Op::CrossEntropy { probs, labels } => {
                let classes = self.dims(*probs)[1];
                let p = self.value(*probs).data();
                let scale = adj[0] / labels.len() as f64;
                let mut g = vec![0.0; p.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let v = p[i * classes + l];
                    if v > CE_EPSILON {
                        g[i * classes + l] = -scale / v;
                    }
                }
                out.push((*probs, g));
            }
            Op::SmoothL1 { pred, target } => {
                let g: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .map(|(p, t)| adj[0] * smooth_l1_slope(p - t))
                    .collect();
                if self.needs(*target) {
                    out.push((*target, g.iter().map(|v| -v).collect()));
                }
                out.push((*pred, g));
            }
            Op::Reshape(x) => out.push((*x, adj.to_vec())),
            Op::ChannelsLast(x) => {
                let d = self.dims(*x);
                let (n, c, area) = (d[0], d[1], d[2] * d[3]);
                let mut g = vec![0.0; adj.len()];
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..area {
                            g[(s * c + ch) * area + p] = adj[(s * area + p) * c + ch];
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::GatherRows { input, rows } => {
                let width = self.dims(*input)[1];
                let mut g = vec![0.0; self.value(*input).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        g[r * width + j] += adj[i * width + j];
                    }
                }
                out.push((*input, g));
            }
            Op::Scale { input, factor } => {
                out.push((*input, adj.iter().map(|a| a * factor).collect()));
            }
            Op::Add(a, b) => {
                out.push((*a, adj.to_vec()));
                out.push((*b, adj.to_vec()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                out.push((*a, adj.iter().zip(bv).map(|(g, y)| g * y).collect()));
                out.push((*b, adj.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::Sum(x) => {
                out.push((*x, vec![adj[0]; self.value(*x).numel()]));
            }
        }
        out
    }
}

pub fn smooth_l1_value(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Named parameter table, ordered by name.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Parameters inserted into a graph, keyed by the same names.
pub type BoundParams = BTreeMap<String, Var>;

pub fn bind_params(g: &mut Graph, params: &ParamSet, trainable: bool) -> BoundParams {
    params
        .iter()
        .map(|(name, t)| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            (name.clone(), g.leaf(t))
        })
        .collect()
}

/// SGD with momentum and L2 weight decay, with optional global
/// gradient-norm clipping in [`OptimState::step_all`].
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(WsdlError::Config(format!(
                "bad optimizer settings lr={learning_rate} momentum={momentum} decay={weight_decay}"
            )));
        }
        Ok(OptimState {
            learning_rate,
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// `v ← momentum·v + grad + decay·param; param ← param − lr·v`.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(WsdlError::shape(
                "sgd_step",
                format!("{name}: grad has {} values, param {:?}", grad.len(), param.dims()),
            ));
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((w, vi), g) in param.data.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi + g + self.weight_decay * *w;
            *w -= self.learning_rate * *vi;
        }
        check_finite("sgd_step", param.data())
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip.filter(|&c| c > 0.0);
        self
    }

    /// Update every parameter in `params` that has a gradient on `g`. With
    /// `clip_norm` set, all gradients are first scaled so their joint L2
    /// norm is at most the bound.
    pub fn step_all(&mut self, params: &mut ParamSet, g: &Graph, bound: &BoundParams) -> Result<()> {
        self.step_all_scaled(params, g, bound, |_| 1.0)
    }

    /// [`OptimState::step_all`] with a per-parameter learning-rate multiplier.
    pub fn step_all_scaled(
        &mut self,
        params: &mut ParamSet,
        g: &Graph,
        bound: &BoundParams,
        lr_scale: impl Fn(&str) -> f64,
    ) -> Result<()> {
        let grads = |name: &String| bound.get(name).and_then(|&v| g.grad(v));
        let factor = match self.clip_norm {
            Some(clip) => {
                let norm = params
                    .keys()
                    .filter_map(grads)
                    .flat_map(|gr| gr.iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let base = self.learning_rate;
        for (name, tensor) in params.iter_mut() {
            if let Some(grad) = grads(name) {
                self.learning_rate = base * lr_scale(name);
                let outcome = if factor == 1.0 {
                    self.step(name, tensor, grad)
                } else {
                    let scaled: Vec<f64> = grad.iter().map(|x| x * factor).collect();
                    self.step(name, tensor, &scaled)
                };
                self.learning_rate = base;
                outcome?;
            }
        }
        Ok(())
    }
}
