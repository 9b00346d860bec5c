//! Small convolutional feature extractor standing in for a pretrained
//! backbone, and mask downsampling to feature resolution.
//!
//! Four 3×3 stages with GELU: stride 2, stride 2, stride 1, then stride 1
//! with dilation 2. Stage 1 yields level 2 (stride 2), stage 3 yields level 3
//! and stage 4 yields level 4 (both stride 4).

use mce_tensor::kernels::{self, AxisTaps};
use mce_tensor::{ConvSpec, Graph, Tensor, Var};

use crate::config::BackboneConfig;
use crate::error::{MceError, Result};
use crate::params::{Init, Initializer, ParamStore, Session};

pub const LEVELS: [usize; 3] = [2, 3, 4];

pub fn level_stride(level: usize) -> usize {
    if level == 2 {
        2
    } else {
        4
    }
}

/// Per-level feature maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn new(level2: Tensor, level3: Tensor, level4: Tensor) -> Result<Self> {
        for (t, l) in [(&level2, 2), (&level3, 3), (&level4, 4)] {
            if t.rank() != 3 {
                return Err(MceError::contract(
                    "feature_pyramid",
                    format!("level {l} must be C×H×W, got {:?}", t.shape()),
                ));
            }
        }
        if level3.shape()[1..] != level4.shape()[1..] {
            return Err(MceError::contract(
                "feature_pyramid",
                "levels 3 and 4 must share a resolution",
            ));
        }
        Ok(FeaturePyramid {
            levels: [level2, level3, level4],
        })
    }

    pub fn level(&self, level: usize) -> &Tensor {
        &self.levels[level - 2]
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(Tensor::all_finite)
    }
}

/// Graph handles of a pyramid inside one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub levels: [Var; 3],
}

impl PyramidVars {
    pub fn level(&self, level: usize) -> Var {
        self.levels[level - 2]
    }

    pub fn constants(g: &mut Graph, p: &FeaturePyramid) -> Self {
        PyramidVars {
            levels: [
                g.constant(p.levels[0].clone()),
                g.constant(p.levels[1].clone()),
                g.constant(p.levels[2].clone()),
            ],
        }
    }
}

const STAGES: [(&str, usize, usize); 4] = [
    ("stage1", 2, 1),
    ("stage2", 2, 1),
    ("stage3", 1, 1),
    ("stage4", 1, 2),
];

pub fn init_params(store: &mut ParamStore, cfg: &BackboneConfig, init: &Initializer) {
    let [w2, w3, w4] = cfg.widths;
    let io = [(3, w2), (w2, w3), (w3, w3), (w3, w4)];
    for ((name, _, _), (cin, cout)) in STAGES.iter().zip(io) {
        let wname = format!("backbone.{name}.weight");
        let w = init.make(
            &wname,
            &[cout, cin, 3, 3],
            Init::Normal {
                fan_in: cin * 9,
                gain: 2.0,
            },
        );
        store.insert(wname, w, !cfg.frozen);
        store.insert(
            format!("backbone.{name}.bias"),
            Tensor::zeros(&[cout]),
            !cfg.frozen,
        );
    }
}

fn check_image(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [3, h, w] if h % 4 == 0 && w % 4 == 0 && *h > 0 && *w > 0 => Ok((*h, *w)),
        [3, h, w] => Err(MceError::contract(
            "extract_features",
            format!("image extents {h}×{w} must be divisible by 4"),
        )),
        other => Err(MceError::contract(
            "extract_features",
            format!("image must be 3×H×W, got {other:?}"),
        )),
    }
}

/// Runs the backbone inside a forward pass; images are mapped from [0, 1] to [−1, 1].
pub fn forward(s: &mut Session, image: Var) -> Result<PyramidVars> {
    check_image(s.g.shape(image))?;
    let shifted = {
        let shape = s.g.shape(image).to_vec();
        let doubled = s.g.scale(image, 2.0);
        let minus_one = s.g.constant(Tensor::full(&shape, -1.0));
        s.g.add(doubled, minus_one)?
    };
    let mut x = shifted;
    let mut outs = Vec::with_capacity(4);
    for (name, stride, dilation) in STAGES {
        let w = s.p(&format!("backbone.{name}.weight"))?;
        let b = s.p(&format!("backbone.{name}.bias"))?;
        let y =
            s.g.conv2d(x, w, Some(b), ConvSpec::strided(3, stride, dilation))?;
        x = s.g.gelu(y);
        outs.push(x);
    }
    Ok(PyramidVars {
        levels: [outs[0], outs[2], outs[3]],
    })
}

/// Level 2/3/4 features of one `3×H×W` image.
pub fn extract_features(store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
    check_image(image.shape())?;
    let mut s = Session::new(store);
    let x = s.g.constant(image.clone());
    let vars = forward(&mut s, x)?;
    FeaturePyramid::new(
        s.g.value(vars.levels[0]).clone(),
        s.g.value(vars.levels[1]).clone(),
        s.g.value(vars.levels[2]).clone(),
    )
}

pub fn check_binary_mask(op: &'static str, mask: &Tensor) -> Result<(usize, usize)> {
    let [h, w] = mask.shape()[..] else {
        return Err(MceError::contract(
            op,
            format!("mask must be H×W, got {:?}", mask.shape()),
        ));
    };
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(MceError::contract(op, "mask must be binary"));
    }
    Ok((h, w))
}

/// Resizes a binary `H×W` mask to a level's resolution and re-binarizes at
/// 0.5. A non-empty input never comes out empty: if every cell falls below
/// the threshold, the cell holding the foreground centroid is set.
pub fn downsample_mask(mask: &Tensor, level: usize) -> Result<Tensor> {
    if !LEVELS.contains(&level) {
        return Err(MceError::contract(
            "downsample_mask",
            format!("unknown level {level}"),
        ));
    }
    let (h, w) = check_binary_mask("downsample_mask", mask)?;
    let stride = level_stride(level);
    let (oh, ow) = ((h / stride).max(1), (w / stride).max(1));
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let soft = kernels::resize_forward(mask.data(), 1, h, w, &ty, &tx);
    let mut out: Vec<f64> = soft
        .iter()
        .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    if out.iter().all(|&v| v == 0.0) {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if mask.data()[y * w + x] == 1.0 {
                    sy += y as f64 + 0.5;
                    sx += x as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        if n > 0.0 {
            let cy = ((sy / n) * oh as f64 / h as f64).floor() as usize;
            let cx = ((sx / n) * ow as f64 / w as f64).floor() as usize;
            out[cy.min(oh - 1) * ow + cx.min(ow - 1)] = 1.0;
        }
    }
    Ok(Tensor::new(vec![oh, ow], out)?)
}
