//! The full few-shot segmentation model: backbone, cross-image encoder,
//! prototype and similarity guidance, and the decoder.

use std::collections::BTreeMap;

use mce_tensor::{Real, Tensor, Var};

use crate::backbone::{self, FeaturePyramid, PyramidVars};
use crate::config::ModelConfig;
use crate::error::{MceError, Result};
use crate::head::{self, Prediction};
use crate::mce;
use crate::params::{Initializer, ParamStore, Session};
use crate::prototype::{self, ShotGuidance};

/// An image as the model sees it: raw pixels, or backbone features that
/// were computed earlier (valid while the backbone is frozen).
#[derive(Clone, Copy, Debug)]
pub enum ImageInput<'a> {
    Raw(&'a Tensor),
    Cached(&'a FeaturePyramid),
}

/// One episode as model input. Masks are full-resolution `H×W` binaries.
#[derive(Clone, Debug)]
pub struct EpisodeView<'a> {
    pub supports: Vec<(ImageInput<'a>, &'a Tensor)>,
    pub query: ImageInput<'a>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `2×H×W` logits at image resolution.
    pub logits: Var,
    pub fused: Var,
    pub guidance: ShotGuidance,
    /// Encoder internals of the first shot, one entry per level.
    pub encodings: Vec<mce::LevelEncoding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MceModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl MceModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = Initializer::new(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&mut params, &cfg.backbone, &init);
        mce::init_params(&mut params, cfg, &init);
        head::init_params(&mut params, cfg, &init);
        Ok(MceModel {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn extract_features(&self, image: &Tensor) -> Result<FeaturePyramid> {
        backbone::extract_features(&self.params, image)
    }

    /// Logits for `view` inside an existing session.
    pub fn forward(&self, s: &mut Session, view: &EpisodeView) -> Result<ForwardOutput> {
        if view.supports.is_empty() {
            return Err(MceError::contract(
                "forward",
                "episode needs at least one support shot",
            ));
        }
        let (h, w) = image_size(&view.query, view.supports[0].1)?;
        let query = bind_image(s, view.query)?;
        let mut shots = Vec::with_capacity(view.supports.len());
        let mut encodings = Vec::new();
        for (i, (img, mask)) in view.supports.iter().enumerate() {
            if mask.shape() != [h, w] {
                return Err(MceError::contract(
                    "forward",
                    format!("support mask {:?} vs query {h}×{w}", mask.shape()),
                ));
            }
            let support = bind_image(s, *img)?;
            let f_cross = if self.cfg.use_cross_map {
                let (f, enc) = mce::mce_forward(s, &self.cfg, &support, &query, mask)?;
                if i == 0 {
                    encodings = enc;
                }
                Some(f)
            } else {
                None
            };
            let proto = prototype::build_prototype(&mut s.g, &support, mask)?;
            let similarity = if self.cfg.use_similarity {
                Some(prototype::similarity_for_shot(
                    &mut s.g, &query, &support, mask,
                )?)
            } else {
                None
            };
            shots.push(ShotGuidance {
                f_cross,
                prototype: proto,
                similarity,
            });
        }
        let guidance = prototype::kshot_aggregate(&mut s.g, &shots)?;
        let fused = head::assemble(
            &mut s.g,
            query.level(3),
            guidance.prototype,
            guidance.f_cross,
            guidance.similarity,
        )?;
        let decoded = head::aspp(s, &self.cfg, fused)?;
        let logits = head::classify(s, decoded, h, w)?;
        Ok(ForwardOutput {
            logits,
            fused,
            guidance,
            encodings,
        })
    }

    pub fn predict(&self, view: &EpisodeView) -> Result<Prediction> {
        let mut s = Session::new(&self.params);
        let out = self.forward(&mut s, view)?;
        Prediction::from_logits(s.g.value(out.logits))
    }

    /// Loss on the query mask and gradients of every trainable parameter
    /// the forward pass touched.
    pub fn loss_and_grads(
        &self,
        view: &EpisodeView,
        query_mask: &Tensor,
    ) -> Result<(Real, BTreeMap<String, Tensor>)> {
        let mut s = Session::new(&self.params);
        let out = self.forward(&mut s, view)?;
        let loss = head::loss(&mut s.g, out.logits, query_mask)?;
        let value = s.g.value(loss).item();
        let bound = s.bound().clone();
        let mut grads = s.g.backward(loss)?;
        let mut named = BTreeMap::new();
        for (name, var) in bound {
            if let Some(t) = grads.take(var) {
                named.insert(name, t);
            }
        }
        Ok((value, named))
    }
}

fn image_size(query: &ImageInput, support_mask: &Tensor) -> Result<(usize, usize)> {
    match query {
        ImageInput::Raw(t) => match t.shape() {
            [3, h, w] => Ok((*h, *w)),
            other => Err(MceError::contract(
                "forward",
                format!("query image must be 3×H×W, got {other:?}"),
            )),
        },
        // Cached features do not carry the pixel size; take it from the mask.
        ImageInput::Cached(_) => match support_mask.shape() {
            [h, w] => Ok((*h, *w)),
            other => Err(MceError::contract(
                "forward",
                format!("support mask must be H×W, got {other:?}"),
            )),
        },
    }
}

fn bind_image(s: &mut Session, img: ImageInput) -> Result<PyramidVars> {
    match img {
        ImageInput::Raw(t) => {
            let x = s.g.constant(t.clone());
            backbone::forward(s, x)
        }
        ImageInput::Cached(p) => Ok(PyramidVars::constants(&mut s.g, p)),
    }
}
