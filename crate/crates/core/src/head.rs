//! Segmentation decoder: channel assembly, ASPP, classifier and loss.

use mce_tensor::{ConvSpec, Graph, Real, Tensor, Var};

use crate::backbone::check_binary_mask;
use crate::config::ModelConfig;
use crate::error::{MceError, Result};
use crate::params::{Init, Initializer, ParamStore, Session};

fn conv_param(
    store: &mut ParamStore,
    init: &Initializer,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    let w = format!("{name}.weight");
    store.insert(
        &w,
        init.make(
            &w,
            &[cout, cin, k, k],
            Init::Normal {
                fan_in: cin * k * k,
                gain: 2.0,
            },
        ),
        true,
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
}

/// Channels of the full `[f_Q | V_S | f_cross | A_sim]` layout present
/// under `cfg`, in order.
fn assembled_inputs(cfg: &ModelConfig) -> (usize, Vec<usize>) {
    let base = cfg.width(3) + cfg.prototype_len();
    let full = base + cfg.cross_channels + 1;
    let mut keep: Vec<usize> = (0..base).collect();
    if cfg.use_cross_map {
        keep.extend(base..base + cfg.cross_channels);
    }
    if cfg.use_similarity {
        keep.push(full - 1);
    }
    (full, keep)
}

pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig, init: &Initializer) {
    let b = cfg.aspp_branch_channels;
    let cd = cfg.decoder_channels;
    // Branches that read the assembled input are cut from the full layout so
    // that ablated variants share initial weights on the channels they keep.
    let (full, keep) = assembled_inputs(cfg);
    for (i, k) in [(0, 1), (1, 3), (2, 3), (3, 3)] {
        let name = format!("head.aspp.b{i}");
        let w = init.make_conv_subset(&format!("{name}.weight"), b, full, k, &keep, 2.0);
        store.insert(format!("{name}.weight"), w, true);
        store.insert(format!("{name}.bias"), Tensor::zeros(&[b]), true);
    }
    conv_param(store, init, "head.aspp.project", cd, 4 * b, 1);
    conv_param(store, init, "head.conv", cd, cd, 3);
    conv_param(store, init, "head.cls", 2, cd, 1);
}

fn conv(s: &mut Session, x: Var, name: &str, spec: ConvSpec) -> Result<Var> {
    let w = s.p(&format!("{name}.weight"))?;
    let b = s.p(&format!("{name}.bias"))?;
    Ok(s.g.conv2d(x, w, Some(b), spec)?)
}

/// Concatenates `[f_Q | prototype broadcast | f_cross | A_sim]` along
/// channels; disabled products are left out rather than zero-filled.
pub fn assemble(
    g: &mut Graph,
    f_q: Var,
    prototype: Var,
    f_cross: Option<Var>,
    similarity: Option<Var>,
) -> Result<Var> {
    let [_, h, w] = g.shape(f_q)[..] else {
        return Err(MceError::contract(
            "assemble",
            "query features must be C×H×W",
        ));
    };
    let proto = g.broadcast_spatial(prototype, h, w)?;
    let mut parts = vec![f_q, proto];
    parts.extend(f_cross);
    parts.extend(similarity);
    for &p in &parts[2..] {
        if g.shape(p)[1..] != [h, w] {
            return Err(MceError::contract(
                "assemble",
                format!("guidance map {:?} does not match {h}×{w}", g.shape(p)),
            ));
        }
    }
    Ok(g.concat(&parts, 0)?)
}

/// A 1×1 branch and three dilated 3×3 branches, each with GELU, reduced
/// to `decoder_channels` by a 1×1 conv with GELU.
pub fn aspp(s: &mut Session, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let mut branches = Vec::with_capacity(4);
    let b0 = conv(s, x, "head.aspp.b0", ConvSpec::same(1, 1))?;
    branches.push(s.g.gelu(b0));
    for (i, &d) in cfg.aspp_dilations.iter().enumerate() {
        let y = conv(s, x, &format!("head.aspp.b{}", i + 1), ConvSpec::same(3, d))?;
        branches.push(s.g.gelu(y));
    }
    let cat = s.g.concat(&branches, 0)?;
    let y = conv(s, cat, "head.aspp.project", ConvSpec::same(1, 1))?;
    Ok(s.g.gelu(y))
}

/// 3×3 conv with GELU, 1×1 conv to two classes, then bilinear upsampling
/// of the logits to `out_h×out_w`.
pub fn classify(s: &mut Session, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let y = conv(s, x, "head.conv", ConvSpec::same(3, 1))?;
    let y = s.g.gelu(y);
    let logits = conv(s, y, "head.cls", ConvSpec::same(1, 1))?;
    Ok(s.g.resize_bilinear(logits, out_h, out_w)?)
}

/// Mean per-pixel cross-entropy of `2×H×W` logits against a binary mask.
pub fn loss(g: &mut Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    check_binary_mask("loss", gt)?;
    if g.shape(logits)[1..] != *gt.shape() {
        return Err(MceError::contract(
            "loss",
            format!("logits {:?} vs mask {:?}", g.shape(logits), gt.shape()),
        ));
    }
    let target: Vec<usize> = gt.data().iter().map(|&m| m as usize).collect();
    Ok(g.softmax_cross_entropy(logits, &target)?)
}

/// Per-pixel class probabilities and the hard mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `2×H×W`, channel 0 background.
    pub probs: Tensor,
    /// `H×W` of {0, 1}; ties go to background.
    pub mask: Tensor,
}

impl Prediction {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let [2, h, w] = logits.shape()[..] else {
            return Err(MceError::contract(
                "classify",
                format!("expected 2×H×W logits, got {:?}", logits.shape()),
            ));
        };
        let p = h * w;
        let l = logits.data();
        let mut probs = vec![0.0; 2 * p];
        let mut mask = vec![0.0; p];
        for i in 0..p {
            let (a, b) = (l[i], l[p + i]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            probs[i] = ea / (ea + eb);
            probs[p + i] = eb / (ea + eb);
            mask[i] = if b > a { 1.0 } else { 0.0 };
        }
        Ok(Prediction {
            probs: Tensor::new(vec![2, h, w], probs)?,
            mask: Tensor::new(vec![h, w], mask)?,
        })
    }

    pub fn mask_bits(&self) -> Vec<u8> {
        self.mask.data().iter().map(|&v| v as u8).collect()
    }
}

/// Mean cross-entropy of probabilities, for checks outside a graph.
pub fn cross_entropy(probs: &Tensor, gt: &Tensor) -> Real {
    let p = gt.len();
    let total: Real = gt
        .data()
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs.data()[t as usize * p + i].ln())
        .sum();
    total / p as Real
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tied_logits_predict_background_at_one_half() {
        let p = Prediction::from_logits(&Tensor::full(&[2, 3, 3], 0.4)).unwrap();
        assert!(p.probs.data().iter().all(|&v| v == 0.5));
        assert!(p.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_cost_ln_two() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 4, 4]));
        let gt = Tensor::from_fn(&[4, 4], |i| (i % 2) as Real);
        let v = loss(&mut g, l, &gt).unwrap();
        assert!((g.value(v).item() - std::f64::consts::LN_2 as Real).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let gt = Tensor::from_fn(&[3, 3], |i| (i % 2) as Real);
        let logits = Tensor::from_fn(&[2, 3, 3], |i| {
            let (c, p) = (i / 9, i % 9);
            if c as Real == gt.data()[p] {
                30.0
            } else {
                -30.0
            }
        });
        let mut g = Graph::new();
        let l = g.constant(logits);
        let v = loss(&mut g, l, &gt).unwrap();
        assert!(g.value(v).item() <= 1e-6);
    }
}
