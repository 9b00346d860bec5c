use crate::kernels::{self, AxisTaps, ConvGeometry};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, dilation and zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride-1 convolution whose output keeps the input resolution.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn strided(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: Real,
    },
    AddRow {
        x: Var,
        b: Var,
    },
    ScaleRows {
        x: Var,
        w: Vec<Real>,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Gelu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<Real>,
    },
    Resize {
        x: Var,
        ty: AxisTaps,
        tx: AxisTaps,
    },
    BroadcastSpatial {
        v: Var,
    },
    MeanCosine {
        q: Var,
        s: Var,
        fg: Vec<bool>,
        qn: Vec<Real>,
        sn: Vec<Real>,
        cos: Vec<Real>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: Vec<usize>,
        probs: Vec<Real>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddRow { .. } => "add_row",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum { .. } => "sum",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::BroadcastSpatial { .. } => "broadcast_spatial",
            Op::MeanCosine { .. } => "mean_cosine",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in issue order, which is
/// a topological order by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of recorded ops whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::contract(
            op,
            format!("expected a matrix, got shape {shape:?}"),
        )),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of recorded ops in tape order, for diagnostics.
    pub fn op_trace(&self) -> String {
        let names: Vec<&str> = self
            .nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.name())
            .collect();
        names.join(" -> ")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Real>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(vec![m, n], c, Op::MatMul { a, b }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Vec<Real> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let d = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), d, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let d = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), d, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let d = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), d, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Var {
        let d = self.value(x).data().iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), d, Op::Scale { x, s }, &[x])
    }

    /// `x[T×C] + b[C]`, broadcasting `b` over tokens.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, c) = matrix_dims("add_row", self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(mismatch("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut d = self.value(x).data().to_vec();
        for r in 0..t {
            for (o, bb) in d[r * c..(r + 1) * c].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        Ok(self.push(vec![t, c], d, Op::AddRow { x, b }, &[x, b]))
    }

    /// Multiplies row `r` of `x[R×C]` by the constant `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: &[Real]) -> Result<Var> {
        let (r, c) = matrix_dims("scale_rows", self.shape(x))?;
        if w.len() != r {
            return Err(mismatch("scale_rows", self.shape(x), &[w.len()]));
        }
        let mut d = self.value(x).data().to_vec();
        for (i, &wi) in w.iter().enumerate() {
            // A zero weight yields an exact +0 whatever the row held.
            d[i * c..(i + 1) * c]
                .iter_mut()
                .for_each(|v| *v = if wi == 0.0 { 0.0 } else { *v * wi });
        }
        Ok(self.push(vec![r, c], d, Op::ScaleRows { x, w: w.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::contract(
                "transpose",
                format!("rank {} < 2", shape.len()),
            ));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let d = transpose_last(self.value(x).data(), r, c);
        let mut out = shape;
        let n = out.len();
        out.swap(n - 2, n - 1);
        Ok(self.push(out, d, Op::Transpose { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let d = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), d, Op::Reshape { x }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::contract(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut d = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                d.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            d,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::contract(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            d.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        Ok(self.push(out, d, Op::Slice { x, axis, start }, &[x]))
    }

    /// Mean over `axis`, which is removed from the shape (a rank-1 input yields `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::contract(
                "mean_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut d = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    d[o * inner + i] += src[(o * n + a) * inner + i];
                }
            }
        }
        d.iter_mut().for_each(|v| *v /= n as Real);
        let mut out: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &s)| s)
            .collect();
        if out.is_empty() {
            out.push(1);
        }
        Ok(self.push(out, d, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    /// Row-wise softmax of `x[R×C] + bias`, `bias[C]` holding 0 or −∞.
    pub fn masked_softmax(&mut self, x: Var, bias: Option<&[Real]>) -> Result<Var> {
        let (r, c) = matrix_dims("masked_softmax", self.shape(x))?;
        if let Some(b) = bias {
            if b.len() != c {
                return Err(mismatch("masked_softmax", self.shape(x), &[b.len()]));
            }
            if b.iter().any(|&v| v != 0.0 && v != Real::NEG_INFINITY) {
                return Err(TensorError::contract(
                    "masked_softmax",
                    "bias entries must be 0 or -inf",
                ));
            }
        }
        let d = kernels::masked_softmax(self.value(x).data(), r, c, bias);
        Ok(self.push(vec![r, c], d, Op::MaskedSoftmax { x }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (t, c) = matrix_dims("layer_norm", self.shape(x))?;
        if c < 2 {
            return Err(TensorError::contract(
                "layer_norm",
                "needs at least 2 channels",
            ));
        }
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xhat, inv_std) = kernels::layer_norm_stats(self.value(x).data(), t, c);
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut d = xhat.clone();
        for r in 0..t {
            for j in 0..c {
                d[r * c + j] = d[r * c + j] * g[j] + s[j];
            }
        }
        Ok(self.push(
            vec![t, c],
            d,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            &[x, gain, shift],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let d = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::gelu(v))
            .collect();
        self.push(self.shape(x).to_vec(), d, Op::Gelu { x }, &[x])
    }

    /// Cross-correlation of `x[C×H×W]` with `w[O×C×k×k]` (k ∈ {1, 3}) plus an
    /// optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [c, h, wd] = xs[..] else {
            return Err(TensorError::contract(
                "conv2d",
                format!("input must be C×H×W, got {xs:?}"),
            ));
        };
        let [o, wc, kh, kw] = ws[..] else {
            return Err(TensorError::contract(
                "conv2d",
                format!("kernel must be O×C×k×k, got {ws:?}"),
            ));
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(TensorError::UnsupportedKernel(kh, kw));
        }
        if wc != c {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch("conv2d", &ws, self.shape(b)));
            }
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(TensorError::contract(
                "conv2d",
                "stride and dilation must be >= 1",
            ));
        }
        let oh = kernels::conv_out_len(h, kh, spec.stride, spec.dilation, spec.padding);
        let ow = kernels::conv_out_len(wd, kh, spec.stride, spec.dilation, spec.padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(TensorError::contract("conv2d", "empty output"));
        };
        let geom = ConvGeometry {
            in_channels: c,
            height: h,
            width: wd,
            out_channels: o,
            kernel: kh,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            out_height: oh,
            out_width: ow,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut d = kernels::matmul_nn(
            self.value(w).data(),
            &cols,
            o,
            geom.col_rows(),
            geom.col_cols(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (ch, chunk) in d.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[ch]);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            vec![o, oh, ow],
            d,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Bilinear resize of `x[C×H×W]` with the align-corners=false convention.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [c, h, w] = xs[..] else {
            return Err(TensorError::contract(
                "bilinear_resize",
                format!("input must be C×H×W, got {xs:?}"),
            ));
        };
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::contract(
                "bilinear_resize",
                "output extents must be >= 1",
            ));
        }
        let ty = AxisTaps::new(h, out_h);
        let tx = AxisTaps::new(w, out_w);
        let d = kernels::resize_forward(self.value(x).data(), c, h, w, &ty, &tx);
        Ok(self.push(vec![c, out_h, out_w], d, Op::Resize { x, ty, tx }, &[x]))
    }

    /// Repeats `v[C]` at every position of an `H×W` grid.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        let [c] = vs[..] else {
            return Err(TensorError::contract(
                "broadcast_spatial",
                format!("expected a vector, got {vs:?}"),
            ));
        };
        let src = self.value(v).data();
        let mut d = Vec::with_capacity(c * h * w);
        for &val in src {
            d.extend(std::iter::repeat_n(val, h * w));
        }
        Ok(self.push(vec![c, h, w], d, Op::BroadcastSpatial { v }, &[v]))
    }

    /// For each row of `q[Nq×C]`, the mean cosine similarity to the rows of
    /// `s[Ns×C]` selected by `fg`. Cosine with a (near) zero vector is 0.
    pub fn mean_cosine(&mut self, q: Var, s: Var, fg: &[bool]) -> Result<Var> {
        let (nq, c) = matrix_dims("mean_cosine", self.shape(q))?;
        let (ns, c2) = matrix_dims("mean_cosine", self.shape(s))?;
        if c != c2 || fg.len() != ns {
            return Err(mismatch("mean_cosine", self.shape(q), self.shape(s)));
        }
        let count = fg.iter().filter(|&&f| f).count();
        if count == 0 {
            return Err(TensorError::contract(
                "mean_cosine",
                "no foreground support positions",
            ));
        }
        let (qd, sd) = (self.value(q).data(), self.value(s).data());
        let qn = kernels::row_norms(qd, nq, c);
        let sn = kernels::row_norms(sd, ns, c);
        let mut cos = kernels::cosine_matrix(qd, &qn, sd, &sn, c);
        for i in 0..nq {
            for (j, &f) in fg.iter().enumerate() {
                if !f {
                    cos[i * ns + j] = 0.0;
                }
            }
        }
        let d = (0..nq)
            .map(|i| cos[i * ns..(i + 1) * ns].iter().sum::<Real>() / count as Real)
            .collect();
        Ok(self.push(
            vec![nq],
            d,
            Op::MeanCosine {
                q,
                s,
                fg: fg.to_vec(),
                qn,
                sn,
                cos,
            },
            &[q, s],
        ))
    }

    /// Mean over positions of `−log softmax(logits)[target]`, with logits laid
    /// out class-major (`K×P` or `K×H×W`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::contract(
                "softmax_cross_entropy",
                "logits need a class axis and positions",
            ));
        }
        let k = shape[0];
        let p: usize = shape[1..].iter().product();
        if target.len() != p {
            return Err(mismatch("softmax_cross_entropy", &shape, &[target.len()]));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= k) {
            return Err(TensorError::contract(
                "softmax_cross_entropy",
                format!("target class {bad} >= {k}"),
            ));
        }
        let l = self.value(logits).data();
        let mut probs = vec![0.0; k * p];
        let mut total = 0.0;
        for (pos, &t) in target.iter().enumerate() {
            let max = (0..k)
                .map(|c| l[c * p + pos])
                .fold(Real::NEG_INFINITY, Real::max);
            let z: Real = (0..k).map(|c| (l[c * p + pos] - max).exp()).sum();
            for c in 0..k {
                probs[c * p + pos] = (l[c * p + pos] - max).exp() / z;
            }
            total += max + z.ln() - l[t * p + pos];
        }
        Ok(self.push(
            vec![1],
            vec![total / p as Real],
            Op::SoftmaxCrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a single-element `loss`. Each graph supports one call.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.backward_op(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|d| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn backward_op(&self, idx: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<Real>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if wants(*a) {
                    acc(*a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, kernels::matmul_tn(val(*a), g, k, m, n));
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale { x, s } => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::AddRow { x, b } => {
                let c = shp(*b)[0];
                if wants(*b) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, db);
                }
                acc(*x, g.to_vec());
            }
            Op::ScaleRows { x, w } => {
                let c = shp(*x)[1];
                let mut d = g.to_vec();
                for (i, &wi) in w.iter().enumerate() {
                    // A zero weight yields an exact +0 whatever the row held.
                    d[i * c..(i + 1) * c]
                        .iter_mut()
                        .for_each(|v| *v = if wi == 0.0 { 0.0 } else { *v * wi });
                }
                acc(*x, d);
            }
            Op::Transpose { x } => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*x, transpose_last(g, r, c));
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis] * inner;
                for &p in parts {
                    let len = shp(p)[*axis] * inner;
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        acc(p, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(shp(*x), *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = split_axis(shp(*x), *axis);
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            d[(o * n + a) * inner + i] = g[o * inner + i] / n as Real;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::MaskedSoftmax { x } => {
                let s = out.shape();
                acc(*x, kernels::softmax_backward(out.data(), g, s[0], s[1]));
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let (t, c) = (shp(*x)[0], shp(*x)[1]);
                let gv = val(*gain);
                if wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for r in 0..t {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    acc(*gain, dg);
                }
                if wants(*shift) {
                    let mut ds = vec![0.0; c];
                    for r in 0..t {
                        for j in 0..c {
                            ds[j] += g[r * c + j];
                        }
                    }
                    acc(*shift, ds);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; t * c];
                    for r in 0..t {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dxh: Vec<Real> = (0..c).map(|j| g[r * c + j] * gv[j]).collect();
                        let sum: Real = dxh.iter().sum();
                        let dot: Real = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] =
                                inv_std[r] / c as Real * (c as Real * dxh[j] - sum - xh[j] * dot);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu { x } => {
                acc(
                    *x,
                    g.iter()
                        .zip(val(*x))
                        .map(|(d, &v)| d * kernels::gelu_grad(v))
                        .collect(),
                );
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (o, rows, ncols) = (geom.out_channels, geom.col_rows(), geom.col_cols());
                if let Some(b) = b {
                    if wants(*b) {
                        acc(*b, g.chunks(ncols).map(|ch| ch.iter().sum()).collect());
                    }
                }
                if wants(*w) {
                    acc(*w, kernels::matmul_nt(g, cols, o, ncols, rows));
                }
                if wants(*x) {
                    let dcol = kernels::matmul_tn(val(*w), g, rows, o, ncols);
                    acc(*x, kernels::col2im(&dcol, geom));
                }
            }
            Op::Resize { x, ty, tx } => {
                let s = shp(*x);
                acc(*x, kernels::resize_backward(g, s[0], s[1], s[2], ty, tx));
            }
            Op::BroadcastSpatial { v } => {
                let hw = out.shape()[1] * out.shape()[2];
                acc(*v, g.chunks(hw).map(|ch| ch.iter().sum()).collect());
            }
            Op::MeanCosine {
                q,
                s,
                fg,
                qn,
                sn,
                cos,
            } => {
                let (nq, c) = (shp(*q)[0], shp(*q)[1]);
                let ns = shp(*s)[0];
                let count = fg.iter().filter(|&&f| f).count() as Real;
                // h[i,j] = g_i / (n |q_i| |s_j|) on live pairs; diag terms carry the cos-weighted self part.
                let mut h = vec![0.0; nq * ns];
                let mut q_self = vec![0.0; nq];
                let mut s_self = vec![0.0; ns];
                for i in 0..nq {
                    for j in 0..ns {
                        let denom = qn[i] * sn[j];
                        if !fg[j] || denom <= kernels::COSINE_EPS {
                            continue;
                        }
                        let gij = g[i] / count;
                        h[i * ns + j] = gij / denom;
                        q_self[i] += gij * cos[i * ns + j] / (qn[i] * qn[i]);
                        s_self[j] += gij * cos[i * ns + j] / (sn[j] * sn[j]);
                    }
                }
                let (qd, sd) = (val(*q), val(*s));
                if wants(*q) {
                    let mut dq = kernels::matmul_nn(&h, sd, nq, ns, c);
                    for i in 0..nq {
                        for k in 0..c {
                            dq[i * c + k] -= q_self[i] * qd[i * c + k];
                        }
                    }
                    acc(*q, dq);
                }
                if wants(*s) {
                    let mut ds = kernels::matmul_tn(&h, qd, ns, nq, c);
                    for j in 0..ns {
                        for k in 0..c {
                            ds[j * c + k] -= s_self[j] * sd[j * c + k];
                        }
                    }
                    acc(*s, ds);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let p = target.len();
                let scale = g[0] / p as Real;
                let mut d: Vec<Real> = probs.iter().map(|v| v * scale).collect();
                for (pos, &t) in target.iter().enumerate() {
                    d[t * p + pos] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}

fn transpose_last(src: &[Real], r: usize, c: usize) -> Vec<Real> {
    let mut d = vec![0.0; src.len()];
    for (bsrc, bdst) in src.chunks(r * c).zip(d.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                bdst[j * r + i] = bsrc[i * c + j];
            }
        }
    }
    d
}
