//! Direct, loop-level reference computations.
//!
//! Everything here works on plain `f64` slices and is written for clarity,
//! not speed. None of it shares code with the production kernels, so the
//! two can be compared against each other in tests.

/// `a[m×k] · b[k×n]` by the triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Cross-correlation of `x[c×h×w]` with `kernel[o×c×k×k]`, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    o: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    let ow = (w + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = bias.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (y * stride + ki * dilation) as i64 - padding as i64;
                            let ix = (xx * stride + kj * dilation) as i64 - padding as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            s += kernel[((oc * c + ic) * k + ki) * k + kj]
                                * x[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Per-row layer norm with unit gain/zero shift removed into `gain`/`shift`.
pub fn layer_norm(
    x: &[f64],
    t: usize,
    c: usize,
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; t * c];
    for r in 0..t {
        let mut mean = 0.0;
        for j in 0..c {
            mean += x[r * c + j];
        }
        mean /= c as f64;
        let mut var = 0.0;
        for j in 0..c {
            var += (x[r * c + j] - mean).powi(2);
        }
        var /= c as f64;
        for j in 0..c {
            out[r * c + j] = (x[r * c + j] - mean) / (var + eps).sqrt() * gain[j] + shift[j];
        }
    }
    out
}

/// Bilinear resize, align-corners=false, each output pixel computed on its own.
pub fn bilinear_resize(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |d: usize, inl: usize, outl: usize| -> (usize, usize, f64) {
        let mut s = (d as f64 + 0.5) * inl as f64 / outl as f64 - 0.5;
        if s < 0.0 {
            s = 0.0;
        }
        let mut i0 = s.floor() as usize;
        if i0 > inl - 1 {
            i0 = inl - 1;
        }
        let i1 = if i0 + 1 < inl { i0 + 1 } else { inl - 1 };
        let l = if i1 == i0 { 0.0 } else { s - i0 as f64 };
        (i0, i1, l)
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let (y0, y1, ly) = coord(y, h, oh);
                let (x0, x1, lx) = coord(xx, w, ow);
                let p = |yy: usize, xq: usize| x[(ch * h + yy) * w + xq];
                out[(ch * oh + y) * ow + xx] = (1.0 - ly) * (1.0 - lx) * p(y0, x0)
                    + (1.0 - ly) * lx * p(y0, x1)
                    + ly * (1.0 - lx) * p(y1, x0)
                    + ly * lx * p(y1, x1);
            }
        }
    }
    out
}

/// erf by its Maclaurin series; accurate to double precision for |x| <= 3.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-19 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

/// Softmax of one row restricted to `live` columns; all-zero if none are live.
pub fn softmax_row(logits: &[f64], live: &[bool]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (v, &l) in logits.iter().zip(live) {
        if l && *v > max {
            max = *v;
        }
    }
    let mut out = vec![0.0; logits.len()];
    if max == f64::NEG_INFINITY {
        return out;
    }
    let mut z = 0.0;
    for j in 0..logits.len() {
        if live[j] {
            out[j] = (logits[j] - max).exp();
            z += out[j];
        }
    }
    for v in out.iter_mut() {
        *v /= z;
    }
    out
}

/// `softmax(q·kᵀ/√d over live keys) · v` one output row at a time.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    dv: usize,
    live: &[bool],
) -> Vec<f64> {
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..d {
                s += q[i * d + t] * k[j * d + t];
            }
            logits[j] = s / (d as f64).sqrt();
        }
        let w = softmax_row(&logits, live);
        for j in 0..n {
            for t in 0..dv {
                out[i * dv + t] += w[j] * v[j * dv + t];
            }
        }
    }
    out
}

/// Masked average pooling of `feat[c×hw]` over `mask[hw] == 1`.
pub fn masked_average_pool(feat: &[f64], c: usize, hw: usize, mask: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    let mut count = 0.0;
    for p in 0..hw {
        if mask[p] == 1.0 {
            count += 1.0;
            for ch in 0..c {
                out[ch] += feat[ch * hw + p];
            }
        }
    }
    out.iter().map(|s| s / count).collect()
}

/// Mean cosine similarity of each query position to the foreground support
/// positions. Maps are `c×hw`; background support features are zeroed first.
pub fn similarity_matrix(qry: &[f64], supp: &[f64], c: usize, hw: usize, mask: &[f64]) -> Vec<f64> {
    let fg: Vec<usize> = (0..hw).filter(|&p| mask[p] == 1.0).collect();
    let mut out = vec![0.0; hw];
    for q in 0..hw {
        let mut total = 0.0;
        for &s in &fg {
            let (mut dot, mut nq, mut ns) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let a = qry[ch * hw + q];
                let b = supp[ch * hw + s] * mask[s];
                dot += a * b;
                nq += a * a;
                ns += b * b;
            }
            let denom = nq.sqrt() * ns.sqrt();
            total += if denom > 1e-12 { dot / denom } else { 0.0 };
        }
        out[q] = total / fg.len() as f64;
    }
    out
}

/// Binary confusion counts `(tp, fp, fn, tn)` of a prediction against truth.
pub fn confusion(pred: &[u8], truth: &[u8]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => tn += 1,
        }
    }
    (tp, fp, fneg, tn)
}

/// mIoU over classes and FB-IoU from `(class, prediction, truth)` episodes,
/// accumulating counts before taking ratios.
pub fn segmentation_metrics(
    episodes: &[(usize, Vec<u8>, Vec<u8>)],
) -> (Vec<(usize, f64)>, f64, f64) {
    let mut classes: Vec<usize> = episodes.iter().map(|e| e.0).collect();
    classes.sort();
    classes.dedup();
    let mut per_class = Vec::new();
    for &c in &classes {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (ec, p, t) in episodes {
            if *ec == c {
                let (a, b, d, _) = confusion(p, t);
                tp += a;
                fp += b;
                fneg += d;
            }
        }
        let denom = tp + fp + fneg;
        per_class.push((
            c,
            if denom == 0 {
                1.0
            } else {
                tp as f64 / denom as f64
            },
        ));
    }
    let miou = per_class.iter().map(|x| x.1).sum::<f64>() / per_class.len() as f64;
    let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (_, p, t) in episodes {
        let (a, b, d, e) = confusion(p, t);
        tp += a;
        fp += b;
        fneg += d;
        tn += e;
    }
    let iou_fg = if tp + fp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fneg) as f64
    };
    let iou_bg = if tn + fp + fneg == 0 {
        1.0
    } else {
        tn as f64 / (tn + fp + fneg) as f64
    };
    (per_class, miou, (iou_fg + iou_bg) / 2.0)
}
