//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ConvSpec, Graph, Real, Result, Tensor, TensorError, Var};

pub const DEFAULT_STEP: Real = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: Real,
    /// Check at most this many coordinates per parameter, evenly spaced.
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: Real,
    /// `(parameter index, flat coordinate)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares the graph gradient of the scalar `f(params)` with central
/// differences over every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, &GradCheckOptions::default())
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    if analytic.iter().any(|t| !t.all_finite()) {
        return Err(TensorError::NonFiniteGradient {
            trace: g.op_trace(),
        });
    }

    let eval = |ps: &[Tensor]| -> Result<Real> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, i));
            }
        }
    }
    Ok(report)
}

/// Worst relative error seen for one op across random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: Real,
}

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone());
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

fn case(rng: &mut ChaCha8Rng, op: &str) -> (Vec<Tensor>, Objective) {
    let dims = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    match op {
        "matmul" => {
            let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
            let w = uniform(rng, &[m, n]);
            (
                vec![uniform(rng, &[m, k]), uniform(rng, &[k, n])],
                Box::new(move |g, p| {
                    let y = g.matmul(p[0], p[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "add" | "sub" | "mul" => {
            let shape = [dims(rng, 1, 3), dims(rng, 1, 4)];
            let w = uniform(rng, &shape);
            let op = op.to_string();
            (
                vec![uniform(rng, &shape), uniform(rng, &shape)],
                Box::new(move |g, p| {
                    let y = match op.as_str() {
                        "add" => g.add(p[0], p[1])?,
                        "sub" => g.sub(p[0], p[1])?,
                        _ => g.mul(p[0], p[1])?,
                    };
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "scale" => {
            let shape = [dims(rng, 1, 5)];
            let s = rng.gen_range(-2.0..2.0);
            let w = uniform(rng, &shape);
            (
                vec![uniform(rng, &shape)],
                Box::new(move |g, p| {
                    let y = g.scale(p[0], s);
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "add_row" => {
            let (t, c) = (dims(rng, 1, 4), dims(rng, 1, 4));
            let w = uniform(rng, &[t, c]);
            (
                vec![uniform(rng, &[t, c]), uniform(rng, &[c])],
                Box::new(move |g, p| {
                    let y = g.add_row(p[0], p[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "scale_rows" => {
            let (r, c) = (dims(rng, 1, 4), dims(rng, 1, 4));
            let rows: Vec<Real> = (0..r)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            let w = uniform(rng, &[r, c]);
            (
                vec![uniform(rng, &[r, c])],
                Box::new(move |g, p| {
                    let y = g.scale_rows(p[0], &rows)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "transpose" => {
            let shape = [dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 4)];
            let w = uniform(rng, &[shape[0], shape[2], shape[1]]);
            (
                vec![uniform(rng, &shape)],
                Box::new(move |g, p| {
                    let y = g.transpose(p[0])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "reshape" => {
            let (a, b) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let w = uniform(rng, &[a * b]);
            (
                vec![uniform(rng, &[a, b])],
                Box::new(move |g, p| {
                    let y = g.reshape(p[0], &[a * b])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "concat" => {
            let axis = dims(rng, 0, 1);
            let mut sa = [dims(rng, 1, 3), dims(rng, 1, 3)];
            let mut sb = sa;
            sb[axis] = dims(rng, 1, 3);
            let mut so = sa;
            so[axis] += sb[axis];
            let w = uniform(rng, &so);
            sa[1 - axis] = so[1 - axis];
            (
                vec![uniform(rng, &sa), uniform(rng, &sb)],
                Box::new(move |g, p| {
                    let y = g.concat(&[p[0], p[1]], axis)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "slice" => {
            let shape = [dims(rng, 1, 3), dims(rng, 2, 5)];
            let start = dims(rng, 0, shape[1] - 1);
            let len = dims(rng, 1, shape[1] - start);
            let w = uniform(rng, &[shape[0], len]);
            (
                vec![uniform(rng, &shape)],
                Box::new(move |g, p| {
                    let y = g.slice(p[0], 1, start, len)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "mean_axis" => {
            let shape = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
            let axis = dims(rng, 0, 2);
            let out: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != axis)
                .map(|(_, &s)| s)
                .collect();
            let w = uniform(rng, &out);
            (
                vec![uniform(rng, &shape)],
                Box::new(move |g, p| {
                    let y = g.mean_axis(p[0], axis)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "sum_of_squares" => {
            let n = dims(rng, 1, 6);
            (
                vec![uniform(rng, &[n])],
                Box::new(|g, p| {
                    let y = g.mul(p[0], p[0])?;
                    Ok(g.sum(y))
                }),
            )
        }
        "masked_softmax" => {
            let (r, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
            let mut bias: Vec<Real> = (0..c)
                .map(|_| {
                    if rng.gen_bool(0.6) {
                        0.0
                    } else {
                        Real::NEG_INFINITY
                    }
                })
                .collect();
            bias[rng.gen_range(0..c)] = 0.0;
            let w = uniform(rng, &[r, c]);
            (
                vec![uniform(rng, &[r, c])],
                Box::new(move |g, p| {
                    let y = g.masked_softmax(p[0], Some(&bias))?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "masked_softmax_first_column" => {
            let (r, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
            let mut bias: Vec<Real> = (0..c)
                .map(|_| {
                    if rng.gen_bool(0.6) {
                        0.0
                    } else {
                        Real::NEG_INFINITY
                    }
                })
                .collect();
            bias[0] = 0.0;
            (
                vec![uniform(rng, &[r, c])],
                Box::new(move |g, p| {
                    let y = g.masked_softmax(p[0], Some(&bias))?;
                    let col = g.slice(y, 1, 0, 1)?;
                    Ok(g.sum(col))
                }),
            )
        }
        "layer_norm" => {
            let (t, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
            let w = uniform(rng, &[t, c]);
            (
                vec![
                    uniform(rng, &[t, c]),
                    uniform(rng, &[c]),
                    uniform(rng, &[c]),
                ],
                Box::new(move |g, p| {
                    let y = g.layer_norm(p[0], p[1], p[2])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "gelu" => {
            let n = dims(rng, 1, 6);
            let w = uniform(rng, &[n]);
            (
                vec![Tensor::from_fn(&[n], |_| rng.gen_range(-3.0..3.0))],
                Box::new(move |g, p| {
                    let y = g.gelu(p[0]);
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "conv2d" => {
            let (c, o) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let (h, wd) = (dims(rng, 3, 6), dims(rng, 3, 6));
            let k = if rng.gen_bool(0.5) { 1 } else { 3 };
            let spec = ConvSpec::strided(k, dims(rng, 1, 2), dims(rng, 1, 2));
            let oh = crate::kernels::conv_out_len(h, k, spec.stride, spec.dilation, spec.padding)
                .unwrap();
            let ow = crate::kernels::conv_out_len(wd, k, spec.stride, spec.dilation, spec.padding)
                .unwrap();
            let w = uniform(rng, &[o, oh, ow]);
            (
                vec![
                    uniform(rng, &[c, h, wd]),
                    uniform(rng, &[o, c, k, k]),
                    uniform(rng, &[o]),
                ],
                Box::new(move |g, p| {
                    let y = g.conv2d(p[0], p[1], Some(p[2]), spec)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "bilinear_resize" => {
            let (c, h, wd) = (dims(rng, 1, 2), dims(rng, 1, 5), dims(rng, 1, 5));
            let (oh, ow) = (dims(rng, 1, 8), dims(rng, 1, 8));
            let w = uniform(rng, &[c, oh, ow]);
            (
                vec![uniform(rng, &[c, h, wd])],
                Box::new(move |g, p| {
                    let y = g.resize_bilinear(p[0], oh, ow)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "broadcast_spatial" => {
            let (c, h, wd) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
            let w = uniform(rng, &[c, h, wd]);
            (
                vec![uniform(rng, &[c])],
                Box::new(move |g, p| {
                    let y = g.broadcast_spatial(p[0], h, wd)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "mean_cosine" => {
            let (nq, ns, c) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 2, 4));
            let mut fg: Vec<bool> = (0..ns).map(|_| rng.gen_bool(0.6)).collect();
            fg[rng.gen_range(0..ns)] = true;
            let w = uniform(rng, &[nq]);
            (
                vec![uniform(rng, &[nq, c]), uniform(rng, &[ns, c])],
                Box::new(move |g, p| {
                    let y = g.mean_cosine(p[0], p[1], &fg)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "softmax_cross_entropy" => {
            let (k, h, wd) = (dims(rng, 2, 3), dims(rng, 1, 3), dims(rng, 1, 3));
            let target: Vec<usize> = (0..h * wd).map(|_| rng.gen_range(0..k)).collect();
            (
                vec![Tensor::from_fn(&[k, h, wd], |_| rng.gen_range(-3.0..3.0))],
                Box::new(move |g, p| g.softmax_cross_entropy(p[0], &target)),
            )
        }
        other => panic!("no gradient case for op {other}"),
    }
}

/// Every differentiable primitive, checked by [`op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "scale_rows",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "mean_axis",
    "sum_of_squares",
    "masked_softmax",
    "masked_softmax_first_column",
    "layer_norm",
    "gelu",
    "conv2d",
    "bilinear_resize",
    "broadcast_spatial",
    "mean_cosine",
    "softmax_cross_entropy",
];

/// Grad-checks each primitive on `instances` random small problems.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst: Real = 0.0;
            for _ in 0..instances {
                let (params, f) = case(&mut rng, op);
                let report = grad_check(f, &params)?;
                worst = worst.max(report.max_rel_error);
            }
            Ok(OpCheck {
                op,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}
