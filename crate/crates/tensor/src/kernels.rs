//! Numeric kernels on flat row-major buffers.
//!
//! These are the forward/backward building blocks used by [`crate::Graph`].
//! They know nothing about the tape and do no shape validation beyond debug
//! assertions; callers check contracts first.

use crate::Real;

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    a_strides: (isize, isize),
    b: &[Real],
    b_strides: (isize, isize),
    beta: Real,
    c: &mut [Real],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(
        k == 0
            || a.len()
                >= 1 + (m - 1) * a_strides.0.unsigned_abs() + (k - 1) * a_strides.1.unsigned_abs()
    );
    debug_assert!(
        k == 0
            || b.len()
                >= 1 + (k - 1) * b_strides.0.unsigned_abs() + (n - 1) * b_strides.1.unsigned_abs()
    );
    // SAFETY: the debug assertions above describe the extents touched by the
    // call; every caller passes buffers sized from the same m/k/n.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        0.0,
        &mut c,
    );
    c
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        0.0,
        &mut c,
    );
    c
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        0.0,
        &mut c,
    );
    c
}

pub fn erf(x: Real) -> Real {
    #[cfg(not(feature = "f32"))]
    {
        libm::erf(x)
    }
    #[cfg(feature = "f32")]
    {
        libm::erff(x)
    }
}

const FRAC_1_SQRT_2: Real = std::f64::consts::FRAC_1_SQRT_2 as Real;
const INV_SQRT_2PI: Real = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: Real) -> Real {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Row-wise softmax of `logits + bias` where bias entries are 0 or −∞.
///
/// Rows with no surviving column come out all-zero.
pub fn masked_softmax(
    logits: &[Real],
    rows: usize,
    cols: usize,
    bias: Option<&[Real]>,
) -> Vec<Real> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let live = |j: usize| bias.is_none_or(|b| b[j] != Real::NEG_INFINITY);
        let mut max = Real::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if live(j) {
                let v = v + bias.map_or(0.0, |b| b[j]);
                if v > max {
                    max = v;
                }
            }
        }
        if max == Real::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if live(j) {
                *d = (v + bias.map_or(0.0, |b| b[j]) - max).exp();
                total += *d;
            }
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Backward of a row-wise softmax given its output `y` and upstream `g`.
pub fn softmax_backward(y: &[Real], g: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &g[r * cols..(r + 1) * cols];
        let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            dx[r * cols + j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

pub const LAYER_NORM_EPS: Real = 1e-5;

/// Normalizes each row; returns `(normalized, inverse std per row)`.
pub fn layer_norm_stats(x: &[Real], rows: usize, cols: usize) -> (Vec<Real>, Vec<Real>) {
    let mut xhat = vec![0.0; rows * cols];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<Real>() / cols as Real;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv[r] = s;
        for (d, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *d = (v - mean) * s;
        }
    }
    (xhat, inv)
}

/// Geometry of a square-kernel 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output extent of a convolution along one axis, or `None` if it would be empty.
pub fn conv_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Unfolds receptive fields into a `(C·k·k) × (H'·W')` matrix.
pub fn im2col(x: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let k = g.kernel;
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_width + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(col: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let k = g.kernel;
    let cols = g.col_cols();
    let mut out = vec![0.0; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] +=
                                src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Source taps for one axis of an align-corners=false bilinear resize.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: Vec<Real>,
}

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as Real / out_len as Real;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for d in 0..out_len {
            let src = ((d as Real + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac
                .push(if hi == lo { 0.0 } else { src - lo as Real });
        }
        taps
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

pub fn resize_forward(
    x: &[Real],
    channels: usize,
    h: usize,
    w: usize,
    ty: &AxisTaps,
    tx: &AxisTaps,
) -> Vec<Real> {
    let (oh, ow) = (ty.len(), tx.len());
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for xo in 0..ow {
                let (x0, x1, fx) = (tx.lo[xo], tx.hi[xo], tx.frac[xo]);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(c * oh + y) * ow + xo] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_backward(
    g: &[Real],
    channels: usize,
    h: usize,
    w: usize,
    ty: &AxisTaps,
    tx: &AxisTaps,
) -> Vec<Real> {
    let (oh, ow) = (ty.len(), tx.len());
    let mut dx = vec![0.0; channels * h * w];
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for xo in 0..ow {
                let (x0, x1, fx) = (tx.lo[xo], tx.hi[xo], tx.frac[xo]);
                let v = g[(c * oh + y) * ow + xo];
                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Cosine-product denominators at or below this are treated as "no relation".
pub const COSINE_EPS: Real = 1e-12;

pub fn row_norms(x: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    (0..rows)
        .map(|r| {
            x[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| v * v)
                .sum::<Real>()
                .sqrt()
        })
        .collect()
}

/// Full `rows_a × rows_b` cosine matrix with the zero-vector convention.
pub fn cosine_matrix(a: &[Real], na: &[Real], b: &[Real], nb: &[Real], cols: usize) -> Vec<Real> {
    let (ra, rb) = (na.len(), nb.len());
    let mut cos = matmul_nt(a, b, ra, cols, rb);
    for i in 0..ra {
        for j in 0..rb {
            let denom = na[i] * nb[j];
            let c = &mut cos[i * rb + j];
            *c = if denom > COSINE_EPS { *c / denom } else { 0.0 };
        }
    }
    cos
}
