//! Episodic SGD training.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use mce_tensor::{Real, Tensor};
use rayon::prelude::*;

use crate::config::OptimConfig;
use crate::data::Dataset;
use crate::episode::{nth_episode, training_pool, FoldSplit};
use crate::error::{MceError, Result};
use crate::harness::{episode_view, FeatureCache};
use crate::model::MceModel;
use crate::params::ParamStore;

/// SGD with momentum; weight decay is added to the gradient before the
/// momentum update.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: &OptimConfig) -> Self {
        Sgd {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        let (lr, mu, wd) = (
            self.lr as Real,
            self.momentum as Real,
            self.weight_decay as Real,
        );
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let g = grads.get(name);
            for (i, (vi, theta)) in v.data_mut().iter_mut().zip(p.value.data_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]) + wd * *theta;
                *vi = mu * *vi + gi;
                *theta -= lr * *vi;
            }
        }
    }
}

/// Trains `model` on episodes from the training pool of `split`.
/// `on_step` sees each iteration's mean batch loss. Returns the loss curve.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut MceModel,
    data: &Dataset,
    cache: Option<&FeatureCache>,
    split: &FoldSplit,
    optim: &OptimConfig,
    shots: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let pool = training_pool(data, split);
    let mut sgd = Sgd::new(optim);
    let mut curve = Vec::with_capacity(optim.iterations);
    let purpose = format!("train.fold{}", split.fold);
    for it in 0..optim.iterations {
        let base = (it * optim.batch) as u64;
        let episodes = (0..optim.batch as u64)
            .map(|b| nth_episode(&pool, shots, seed, &purpose, base + b))
            .collect::<Result<Vec<_>>>()?;
        let model_ref = &*model;
        let results = episodes
            .par_iter()
            .map(|e| {
                let view = episode_view(data, cache, e);
                model_ref.loss_and_grads(&view, &data.samples[e.query].mask)
            })
            .collect::<Result<Vec<_>>>()?;

        // Sum in episode order so the result does not depend on scheduling.
        let scale = 1.0 / optim.batch as Real;
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (l, g) in results {
            loss += l as f64;
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let loss = loss / optim.batch as f64;
        if !loss.is_finite() || grads.values().any(|t| !t.all_finite()) {
            return Err(MceError::Divergence {
                iteration: it,
                loss,
            });
        }
        sgd.step(&mut model.params, &grads);
        curve.push(loss);
        on_step(it, loss);
    }
    Ok(curve)
}

pub fn write_loss_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| MceError::io(path, e))
}
