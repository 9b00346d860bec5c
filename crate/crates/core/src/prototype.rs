//! Class prototypes by masked average pooling, the level-4 similarity map
//! and K-shot averaging of guidance products.

use mce_tensor::{Graph, Real, Tensor, Var};

use crate::backbone::{check_binary_mask, downsample_mask, PyramidVars};
use crate::error::{MceError, Result};

fn foreground_count(op: &'static str, binmask: &Tensor) -> Result<usize> {
    check_binary_mask(op, binmask)?;
    let n = binmask.data().iter().filter(|&&m| m == 1.0).count();
    if n == 0 {
        return Err(MceError::contract(op, "mask has no foreground"));
    }
    Ok(n)
}

/// Mean of `feat[C×h×w]` over positions where `binmask[h×w]` is 1.
pub fn masked_average_pool(g: &mut Graph, feat: Var, binmask: &Tensor) -> Result<Var> {
    let n = foreground_count("masked_average_pool", binmask)?;
    let [c, h, w] = g.shape(feat)[..] else {
        return Err(MceError::contract(
            "masked_average_pool",
            "features must be C×H×W",
        ));
    };
    if binmask.shape() != [h, w] {
        return Err(MceError::contract(
            "masked_average_pool",
            format!("mask {:?} vs features {h}×{w}", binmask.shape()),
        ));
    }
    let flat = g.reshape(feat, &[c, h * w])?;
    let weights = g.constant(Tensor::new(vec![h * w, 1], binmask.data().to_vec())?);
    let summed = g.matmul(flat, weights)?;
    let mean = g.scale(summed, 1.0 / n as Real);
    Ok(g.reshape(mean, &[c])?)
}

/// Level-2 and level-3 pooled support features, concatenated.
pub fn build_prototype(g: &mut Graph, support: &PyramidVars, support_mask: &Tensor) -> Result<Var> {
    let m2 = downsample_mask(support_mask, 2)?;
    let m3 = downsample_mask(support_mask, 3)?;
    let p2 = masked_average_pool(g, support.level(2), &m2)?;
    let p3 = masked_average_pool(g, support.level(3), &m3)?;
    Ok(g.concat(&[p2, p3], 0)?)
}

/// For every query position, the mean cosine similarity to the foreground
/// support positions. Returns a `1×h×w` map with entries in [−1, 1].
pub fn similarity_matrix(g: &mut Graph, qry4: Var, supp4: Var, binmask: &Tensor) -> Result<Var> {
    foreground_count("similarity_matrix", binmask)?;
    let [c, h, w] = g.shape(qry4)[..] else {
        return Err(MceError::contract(
            "similarity_matrix",
            "query features must be C×H×W",
        ));
    };
    if g.shape(supp4) != [c, h, w] || binmask.shape() != [h, w] {
        return Err(MceError::contract(
            "similarity_matrix",
            format!(
                "query {:?}, support {:?}, mask {:?}",
                [c, h, w],
                g.shape(supp4),
                binmask.shape()
            ),
        ));
    }
    let q = g.reshape(qry4, &[c, h * w])?;
    let q = g.transpose(q)?;
    let s = g.reshape(supp4, &[c, h * w])?;
    let s = g.transpose(s)?;
    let fg: Vec<bool> = binmask.data().iter().map(|&m| m == 1.0).collect();
    let sim = g.mean_cosine(q, s, &fg)?;
    Ok(g.reshape(sim, &[1, h, w])?)
}

/// `A_sim` between query and one support shot at attention resolution.
pub fn similarity_for_shot(
    g: &mut Graph,
    query: &PyramidVars,
    support: &PyramidVars,
    support_mask: &Tensor,
) -> Result<Var> {
    let m4 = downsample_mask(support_mask, 4)?;
    similarity_matrix(g, query.level(4), support.level(4), &m4)
}

/// Guidance products of one support shot; absent entries are disabled by
/// the model configuration.
#[derive(Clone, Copy, Debug)]
pub struct ShotGuidance {
    pub f_cross: Option<Var>,
    pub prototype: Var,
    pub similarity: Option<Var>,
}

/// Element-wise mean over `xs`, computed as `x₀ + Σ(x_k − x₀)/K` so that K
/// identical inputs return the first exactly.
fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let first = xs[0];
    if xs.len() == 1 {
        return Ok(first);
    }
    let mut acc: Option<Var> = None;
    for &x in &xs[1..] {
        let d = g.sub(x, first)?;
        acc = Some(match acc {
            None => d,
            Some(a) => g.add(a, d)?,
        });
    }
    let shift = g.scale(acc.expect("K >= 2"), 1.0 / xs.len() as Real);
    Ok(g.add(first, shift)?)
}

/// Averages each guidance product across the K shots.
pub fn kshot_aggregate(g: &mut Graph, parts: &[ShotGuidance]) -> Result<ShotGuidance> {
    if parts.is_empty() {
        return Err(MceError::contract(
            "kshot_aggregate",
            "need at least one shot",
        ));
    }
    let collect = |f: fn(&ShotGuidance) -> Option<Var>| -> Result<Option<Vec<Var>>> {
        let xs: Vec<Option<Var>> = parts.iter().map(f).collect();
        if xs.iter().all(Option::is_some) {
            Ok(Some(xs.into_iter().flatten().collect()))
        } else if xs.iter().all(Option::is_none) {
            Ok(None)
        } else {
            Err(MceError::contract(
                "kshot_aggregate",
                "shots disagree on which products exist",
            ))
        }
    };
    let f_cross = collect(|p| p.f_cross)?;
    let sims = collect(|p| p.similarity)?;
    let protos: Vec<Var> = parts.iter().map(|p| p.prototype).collect();
    Ok(ShotGuidance {
        f_cross: f_cross.map(|xs| mean_of(g, &xs)).transpose()?,
        prototype: mean_of(g, &protos)?,
        similarity: sims.map(|xs| mean_of(g, &xs)).transpose()?,
    })
}
