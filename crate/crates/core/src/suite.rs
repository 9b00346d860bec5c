//! Finite-difference gradient suite: every graph primitive plus the model's
//! composite blocks and its end-to-end episode loss.

use std::collections::BTreeMap;

use mce_tensor::gradcheck::{grad_check_with, op_suite, GradCheckOptions, OpCheck};
use mce_tensor::{Graph, Real, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, BackboneConfig, ModelConfig};
use crate::error::{MceError, Result};
use crate::head;
use crate::mce::{branch_prefix, build_additive_mask, encode_level, mlp_block, BranchVars};
use crate::model::{EpisodeView, ImageInput, MceModel};
use crate::params::Session;

/// Relative-error bound every suite entry must meet.
pub const TOLERANCE: Real = 1e-4;

/// Composite checks run by [`gradient_suite`] after the primitives.
pub const COMPOSITE_CASES: &[&str] = &[
    "mce.mlp_block",
    "mce.encode_level",
    "head.decoder",
    "model.episode_loss",
];

/// A deliberately small model so that every parameter can be probed.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: [8, 8, 8],
            frozen: false,
        },
        token_dim: 4,
        heads: 2,
        cross_channels: 4,
        decoder_channels: 8,
        aspp_branch_channels: 4,
        aspp_dilations: [1, 2, 3],
        ..ModelConfig::default()
    }
}

const TINY_IMAGE: usize = 16;
const COORDS_PER_PARAM: usize = 3;

fn to_tensor_err(e: MceError) -> TensorError {
    match e {
        MceError::Tensor(t) => t,
        other => TensorError::Contract {
            op: "gradient_suite",
            msg: other.to_string(),
        },
    }
}

/// Grad-checks `f` with respect to the named model parameters followed by
/// `inputs`. Inside `f`, the session already has the named parameters bound
/// to the perturbed leaves and receives the input vars.
fn check_with_params<F>(
    model: &MceModel,
    names: &[String],
    inputs: Vec<Tensor>,
    f: F,
) -> Result<Real>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut params: Vec<Tensor> = names
        .iter()
        .map(|n| model.params.value(n).cloned())
        .collect::<Result<_>>()?;
    params.extend(inputs);
    let opts = GradCheckOptions {
        max_coords_per_param: Some(COORDS_PER_PARAM),
        ..GradCheckOptions::default()
    };
    let report = grad_check_with(
        |g: &mut Graph, vars: &[Var]| {
            let bound: BTreeMap<String, Var> =
                names.iter().cloned().zip(vars.iter().copied()).collect();
            let mut s = Session::with_bindings(std::mem::take(g), &model.params, bound);
            let out = f(&mut s, &vars[names.len()..]);
            *g = s.into_graph();
            out.map_err(to_tensor_err)
        },
        &params,
        &opts,
    )?;
    Ok(report.max_rel_error)
}

fn sum_of_squares(g: &mut Graph, x: Var) -> Result<Var> {
    let y = g.mul(x, x)?;
    Ok(g.sum(y))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// A random binary mask with at least one foreground pixel.
fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Tensor {
    let mut m = Tensor::from_fn(&[h, w], |_| if rng.gen_bool(p) { 1.0 } else { 0.0 });
    let i = rng.gen_range(0..h * w);
    m.data_mut()[i] = 1.0;
    m
}

fn names_with_prefix(model: &MceModel, prefix: &str) -> Vec<String> {
    model
        .params
        .iter()
        .filter(|(n, p)| p.trainable && n.starts_with(prefix))
        .map(|(n, _)| n.clone())
        .collect()
}

fn composite_case(name: &str, rng: &mut ChaCha8Rng, instance: u64) -> Result<Real> {
    let cfg = tiny_model_config();
    let model = MceModel::new(&cfg, derive_seed(instance, name, 0))?;
    let (c, d) = (cfg.backbone.widths[1], cfg.token_dim);
    match name {
        "mce.mlp_block" => {
            let prefix = branch_prefix(
                3,
                if instance % 2 == 0 {
                    "support"
                } else {
                    "query"
                },
            );
            let names = names_with_prefix(&model, &format!("{prefix}.mlp"));
            let n = rng.gen_range(2..6);
            check_with_params(&model, &names, vec![random(rng, &[n, d])], |s, x| {
                let b = BranchVars::bind(s, &prefix)?;
                let y = mlp_block(&mut s.g, x[0], &b)?;
                sum_of_squares(&mut s.g, y)
            })
        }
        "mce.encode_level" => {
            let names = names_with_prefix(&model, &branch_prefix(3, ""));
            let n = rng.gen_range(3..7);
            let mask = build_additive_mask(&random_mask(rng, n, 1, 0.5))?;
            let inputs = vec![random(rng, &[n, c]), random(rng, &[n, c])];
            check_with_params(&model, &names, inputs, |s, x| {
                let sup = BranchVars::bind(s, &branch_prefix(3, "support"))?;
                let qry = BranchVars::bind(s, &branch_prefix(3, "query"))?;
                let e = encode_level(&mut s.g, x[0], x[1], &mask, &sup, &qry, cfg.heads)?;
                let a = sum_of_squares(&mut s.g, e.f_support)?;
                let b = sum_of_squares(&mut s.g, e.f_query)?;
                let b = s.g.scale(b, 0.5);
                Ok(s.g.add(a, b)?)
            })
        }
        "head.decoder" => {
            let names = names_with_prefix(&model, "head.");
            let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
            let (oh, ow) = (h * 4, w * 4);
            let gt = random_mask(rng, oh, ow, 0.3);
            let proto_len: usize = cfg.backbone.widths[..2].iter().sum();
            let inputs = vec![
                random(rng, &[c, h, w]),
                random(rng, &[proto_len]),
                random(rng, &[cfg.cross_channels, h, w]),
                random(rng, &[1, h, w]),
            ];
            check_with_params(&model, &names, inputs, |s, x| {
                let fused = head::assemble(&mut s.g, x[0], x[1], Some(x[2]), Some(x[3]))?;
                let y = head::aspp(s, &cfg, fused)?;
                let logits = head::classify(s, y, oh, ow)?;
                head::loss(&mut s.g, logits, &gt)
            })
        }
        "model.episode_loss" => {
            let names: Vec<String> = model.params.trainable_names();
            let shots = 1 + (instance % 2) as usize;
            let px = TINY_IMAGE;
            let images: Vec<Tensor> = (0..=shots)
                .map(|_| Tensor::from_fn(&[3, px, px], |_| rng.gen_range(0.0..1.0)))
                .collect();
            let masks: Vec<Tensor> = (0..=shots).map(|_| random_mask(rng, px, px, 0.3)).collect();
            check_with_params(&model, &names, Vec::new(), |s, _| {
                let view = EpisodeView {
                    supports: (0..shots)
                        .map(|k| (ImageInput::Raw(&images[k]), &masks[k]))
                        .collect(),
                    query: ImageInput::Raw(&images[shots]),
                };
                let out = model.forward(s, &view)?;
                head::loss(&mut s.g, out.logits, &masks[shots])
            })
        }
        other => Err(MceError::contract(
            "gradient_suite",
            format!("unknown case {other}"),
        )),
    }
}

/// Runs the primitive suite and every composite case on `instances` random
/// instances each. One entry per op or case, in a fixed order.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = op_suite(instances, seed)?;
    for &name in COMPOSITE_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name, 1));
        let mut worst: Real = 0.0;
        for i in 0..instances {
            let err = composite_case(name, &mut rng, derive_seed(seed, name, i as u64 + 2))?;
            worst = worst.max(err);
        }
        out.push(OpCheck {
            op: name,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_cases_pass_once() {
        for &name in COMPOSITE_CASES {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let err = composite_case(name, &mut rng, 1).unwrap();
            assert!(err <= TOLERANCE, "{name}: {err}");
        }
    }
}
