//! Glue between the dataset and the model: cached backbone features,
//! episode views, and evaluation.

use rayon::prelude::*;

use crate::backbone::FeaturePyramid;
use crate::data::Dataset;
use crate::episode::{evaluation_episodes, test_pool, Episode, FoldSplit};
use crate::error::{MceError, Result};
use crate::metrics::{Confusion, MetricsAccumulator, MetricsReport};
use crate::model::{EpisodeView, ImageInput, MceModel};

/// Backbone features of every dataset sample. Only valid for a frozen
/// backbone; two models built from the same seed share the backbone and can
/// share the cache.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pyramids: Vec<FeaturePyramid>,
}

impl FeatureCache {
    pub fn build(model: &MceModel, data: &Dataset) -> Result<Self> {
        if !model.cfg.backbone.frozen {
            return Err(MceError::contract(
                "feature_cache",
                "backbone is trainable; features cannot be cached",
            ));
        }
        let pyramids = data
            .samples
            .par_iter()
            .map(|s| model.extract_features(&s.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache { pyramids })
    }

    pub fn get(&self, index: usize) -> &FeaturePyramid {
        &self.pyramids[index]
    }
}

/// Model input for `episode`, using cached features when available.
pub fn episode_view<'a>(
    data: &'a Dataset,
    cache: Option<&'a FeatureCache>,
    episode: &Episode,
) -> EpisodeView<'a> {
    let input = |i: usize| match cache {
        Some(c) => ImageInput::Cached(c.get(i)),
        None => ImageInput::Raw(&data.samples[i].image),
    };
    EpisodeView {
        supports: episode
            .support
            .iter()
            .map(|&i| (input(i), &data.samples[i].mask))
            .collect(),
        query: input(episode.query),
    }
}

/// What produces the predicted query masks during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a MceModel),
    /// Returns the ground-truth mask; a harness sanity check.
    GroundTruth,
}

impl Predictor<'_> {
    pub fn predict_bits(
        &self,
        data: &Dataset,
        cache: Option<&FeatureCache>,
        episode: &Episode,
    ) -> Result<Vec<u8>> {
        match self {
            Predictor::Model(m) => Ok(m.predict(&episode_view(data, cache, episode))?.mask_bits()),
            Predictor::GroundTruth => Ok(mask_bits(&data.samples[episode.query].mask)),
        }
    }
}

pub fn mask_bits(mask: &mce_tensor::Tensor) -> Vec<u8> {
    mask.data().iter().map(|&v| u8::from(v == 1.0)).collect()
}

/// Confusion counts per episode, in episode order.
pub fn score_episodes(
    predictor: Predictor,
    data: &Dataset,
    cache: Option<&FeatureCache>,
    episodes: &[Episode],
    jobs: usize,
) -> Result<Vec<Confusion>> {
    let run = || {
        episodes
            .par_iter()
            .map(|e| {
                let pred = predictor.predict_bits(data, cache, e)?;
                Ok(Confusion::from_masks(
                    &pred,
                    &mask_bits(&data.samples[e.query].mask),
                ))
            })
            .collect::<Result<Vec<_>>>()
    };
    if jobs == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| MceError::Config(format!("thread pool: {e}")))?
            .install(run)
    }
}

/// Evaluates `n` fixed `k`-shot episodes on the test classes of `split`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    predictor: Predictor,
    data: &Dataset,
    cache: Option<&FeatureCache>,
    split: &FoldSplit,
    k: usize,
    n: usize,
    seed: u64,
    jobs: usize,
) -> Result<MetricsReport> {
    let episodes = evaluation_episodes(&test_pool(data, split), k, n, seed, split.fold)?;
    let scores = score_episodes(predictor, data, cache, &episodes, jobs)?;
    let mut acc = MetricsAccumulator::new();
    for (e, c) in episodes.iter().zip(&scores) {
        acc.add_confusion(e.class_id, c);
    }
    Ok(acc.report(seed))
}
