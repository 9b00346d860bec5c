//! Component ablations: train and evaluate each model variant on every
//! fold and seed, then summarize mIoU as mean ± std over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{MceOutput, ModelConfig, RunConfig};
use crate::data::generate_dataset;
use crate::episode::split_folds;
use crate::error::Result;
use crate::harness::{evaluate, FeatureCache, Predictor};
use crate::model::MceModel;
use crate::train::train;

/// One model configuration of the ablation grid, expressed as the three
/// switches it varies. `cross: None` disables the cross map entirely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub cross: Option<MceOutput>,
    pub similarity: bool,
    pub multi_level: bool,
}

impl Variant {
    fn new(name: &str, cross: Option<MceOutput>, similarity: bool, multi_level: bool) -> Self {
        Variant {
            name: name.to_string(),
            cross,
            similarity,
            multi_level,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        m.use_cross_map = self.cross.is_some();
        if let Some(out) = self.cross {
            m.mce_output = out;
        }
        m.use_similarity = self.similarity;
        m.multi_level = self.multi_level;
        m
    }
}

/// The full model, the two single-branch outputs, each single-component
/// removal, and the baseline with neither cross map nor similarity.
pub fn core_variants() -> Vec<Variant> {
    vec![
        Variant::new("fusion", Some(MceOutput::Fusion), true, true),
        Variant::new("query_only", Some(MceOutput::QueryOnly), true, true),
        Variant::new("support_only", Some(MceOutput::SupportOnly), true, true),
        Variant::new("no_cross_map", None, true, true),
        Variant::new("no_similarity", Some(MceOutput::Fusion), false, true),
        Variant::new("single_level", Some(MceOutput::Fusion), true, false),
        Variant::new("baseline", None, false, true),
    ]
}

/// Every combination of encoder output, similarity and level count, plus
/// the baseline.
pub fn full_grid() -> Vec<Variant> {
    let mut out = Vec::new();
    for (oname, o) in [
        ("fusion", MceOutput::Fusion),
        ("query_only", MceOutput::QueryOnly),
        ("support_only", MceOutput::SupportOnly),
    ] {
        for sim in [true, false] {
            for multi in [true, false] {
                let name = format!(
                    "{oname}{}{}",
                    if sim { "" } else { "+no_sim" },
                    if multi { "" } else { "+l3" }
                );
                out.push(Variant::new(&name, Some(o), sim, multi));
            }
        }
    }
    out.push(Variant::new("baseline", None, false, true));
    out
}

pub fn variant(name: &str) -> Option<Variant> {
    core_variants()
        .into_iter()
        .chain(full_grid())
        .find(|v| v.name == name)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub variant: String,
    pub fold: usize,
    pub seed: u64,
    pub shots: usize,
    pub miou: f64,
    pub fbiou: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub folds: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Extra shot counts evaluated on top of `protocol.shots`, per variant name.
    pub extra_shots: BTreeMap<String, Vec<usize>>,
}

impl AblationPlan {
    pub fn full(cfg: &RunConfig) -> Self {
        AblationPlan {
            variants: core_variants(),
            folds: (0..cfg.protocol.n_folds).collect(),
            seeds: cfg.protocol.seeds.clone(),
            extra_shots: BTreeMap::new(),
        }
    }
}

/// Runs the plan. Per seed the dataset and the frozen-backbone feature cache
/// are built once and shared by every variant, as is each parameter's
/// initial value.
pub fn run_ablations(
    cfg: &RunConfig,
    plan: &AblationPlan,
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let splits = split_folds(cfg.protocol.n_classes, cfg.protocol.n_folds)?;
    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        let data = generate_dataset(&cfg.dataset, cfg.protocol.n_classes, seed)?;
        let cache = if cfg.model.backbone.frozen {
            Some(FeatureCache::build(
                &MceModel::new(&cfg.model, seed)?,
                &data,
            )?)
        } else {
            None
        };
        for &fold in &plan.folds {
            let split = &splits[fold];
            for v in &plan.variants {
                let model_cfg = v.apply(&cfg.model);
                let mut model = MceModel::new(&model_cfg, seed)?;
                let curve = train(
                    &mut model,
                    &data,
                    cache.as_ref(),
                    split,
                    &cfg.optim,
                    cfg.protocol.shots,
                    seed,
                    |_, _| {},
                )?;
                let final_loss = curve.last().copied().unwrap_or(f64::NAN);
                let mut shots = vec![cfg.protocol.shots];
                shots.extend(plan.extra_shots.get(&v.name).into_iter().flatten());
                for k in shots {
                    let report = evaluate(
                        Predictor::Model(&model),
                        &data,
                        cache.as_ref(),
                        split,
                        k,
                        cfg.protocol.eval_episodes,
                        seed,
                        cfg.protocol.jobs,
                    )?;
                    let run = AblationRun {
                        variant: v.name.clone(),
                        fold,
                        seed,
                        shots: k,
                        miou: report.miou,
                        fbiou: report.fbiou,
                        final_loss,
                    };
                    on_run(&run);
                    runs.push(run);
                }
            }
        }
    }
    Ok(runs)
}

/// Mean ± sample std over seeds of the fold-averaged mIoU.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub variant: String,
    pub shots: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub seeds: usize,
}

pub fn summarize(runs: &[AblationRun]) -> Vec<AblationSummary> {
    // (variant, shots) -> seed -> fold mIoUs
    let mut groups: BTreeMap<(String, usize), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.variant.clone(), r.shots))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r.miou);
    }
    // Report in run order: the first appearance of each variant.
    let mut order: BTreeMap<String, usize> = BTreeMap::new();
    for r in runs {
        let n = order.len();
        order.entry(r.variant.clone()).or_insert(n);
    }
    let mut out: Vec<AblationSummary> = groups
        .into_iter()
        .map(|((variant, shots), per_seed)| {
            let means: Vec<f64> = per_seed
                .values()
                .map(|f| f.iter().sum::<f64>() / f.len() as f64)
                .collect();
            let n = means.len() as f64;
            let mean = means.iter().sum::<f64>() / n;
            let var = if means.len() > 1 {
                means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            AblationSummary {
                variant,
                shots,
                mean_miou: mean,
                std_miou: var.sqrt(),
                seeds: means.len(),
            }
        })
        .collect();
    out.sort_by_key(|s| (order[&s.variant], s.shots));
    out
}

pub fn mean_miou(summary: &[AblationSummary], variant: &str, shots: usize) -> Option<f64> {
    summary
        .iter()
        .find(|s| s.variant == variant && s.shots == shots)
        .map(|s| s.mean_miou)
}

/// Per-run rows followed by summary rows (`fold` and `seed` set to `mean`).
pub fn to_csv(runs: &[AblationRun], summary: &[AblationSummary]) -> String {
    let mut out = String::from("variant,fold,seed,shots,miou,fbiou,miou_std\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},",
            r.variant, r.fold, r.seed, r.shots, r.miou, r.fbiou
        );
    }
    for s in summary {
        let _ = writeln!(
            out,
            "{},mean,mean,{},{:.6},,{:.6}",
            s.variant, s.shots, s.mean_miou, s.std_miou
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_cover_the_expected_configurations() {
        assert_eq!(core_variants().len(), 7);
        assert_eq!(full_grid().len(), 13);
        let base = variant("baseline").unwrap().apply(&ModelConfig::default());
        assert!(!base.use_cross_map && !base.use_similarity);
        let l3 = variant("query_only+no_sim+l3")
            .unwrap()
            .apply(&ModelConfig::default());
        assert_eq!(l3.mce_output, MceOutput::QueryOnly);
        assert!(l3.use_cross_map && !l3.use_similarity && !l3.multi_level);
    }

    #[test]
    fn summary_averages_folds_then_seeds() {
        let run = |seed, fold, miou| AblationRun {
            variant: "fusion".into(),
            fold,
            seed,
            shots: 1,
            miou,
            fbiou: 0.0,
            final_loss: 0.0,
        };
        let s = summarize(&[
            run(0, 0, 0.2),
            run(0, 1, 0.4),
            run(1, 0, 0.5),
            run(1, 1, 0.5),
        ]);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean_miou - 0.4).abs() < 1e-12);
        assert!((s[0].std_miou - (0.02f64).sqrt()).abs() < 1e-12);
    }
}
