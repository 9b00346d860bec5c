//! Masked cross-image encoding.
//!
//! Support and query feature maps are flattened into token sequences and run
//! through two attention branches per level. The support branch attends
//! among support tokens, with background keys masked out, and reads query
//! values. The query branch attends among query tokens and reads support
//! values whose background rows are zeroed. Each branch ends in its own MLP.

use mce_tensor::{ConvSpec, Graph, Real, Tensor, Var};

use crate::backbone::{downsample_mask, PyramidVars};
use crate::config::{MceOutput, ModelConfig};
use crate::error::{MceError, Result};
use crate::params::{Init, Initializer, ParamStore, Session};

/// Tokens of one feature map, `[h·w × C]` in row-major spatial order.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

/// Flattens a `C×h×w` map into `h·w` tokens of width `C`.
pub fn tokenize(g: &mut Graph, feat: Var) -> Result<TokenSequence> {
    let [c, h, w] = g.shape(feat)[..] else {
        return Err(MceError::contract(
            "tokenize",
            format!("expected C×H×W, got {:?}", g.shape(feat)),
        ));
    };
    let flat = g.reshape(feat, &[c, h * w])?;
    Ok(TokenSequence {
        var: g.transpose(flat)?,
        h,
        w,
    })
}

/// Inverse of [`tokenize`].
pub fn untokenize(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose(tokens)?;
    let c = g.shape(t)[0];
    Ok(g.reshape(t, &[c, h, w])?)
}

/// Key-axis mask in additive form: 0 for foreground, −∞ for background.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveMask {
    pub bias: Vec<Real>,
}

impl AdditiveMask {
    pub fn from_binary(mask: &Tensor) -> Result<Self> {
        let bias = mask
            .data()
            .iter()
            .map(|&m| match m {
                v if v == 1.0 => Ok(0.0),
                v if v == 0.0 => Ok(Real::NEG_INFINITY),
                _ => Err(MceError::contract("additive_mask", "mask must be binary")),
            })
            .collect::<Result<Vec<_>>>()?;
        if !bias.contains(&0.0) {
            return Err(MceError::contract(
                "additive_mask",
                "mask has no foreground",
            ));
        }
        Ok(AdditiveMask { bias })
    }

    /// `{0, 1}` row weights matching the mask.
    pub fn keep(&self) -> Vec<Real> {
        self.bias
            .iter()
            .map(|&b| if b == 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bias.is_empty()
    }
}

/// Graph handles for one branch: projections plus its MLP.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub ln_gain: Var,
    pub ln_shift: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl BranchVars {
    pub fn bind(s: &mut Session, prefix: &str) -> Result<Self> {
        Ok(BranchVars {
            wq: s.p(&format!("{prefix}.wq"))?,
            wk: s.p(&format!("{prefix}.wk"))?,
            wv: s.p(&format!("{prefix}.wv"))?,
            ln_gain: s.p(&format!("{prefix}.mlp.ln.gain"))?,
            ln_shift: s.p(&format!("{prefix}.mlp.ln.shift"))?,
            fc1_w: s.p(&format!("{prefix}.mlp.fc1.weight"))?,
            fc1_b: s.p(&format!("{prefix}.mlp.fc1.bias"))?,
            fc2_w: s.p(&format!("{prefix}.mlp.fc2.weight"))?,
            fc2_b: s.p(&format!("{prefix}.mlp.fc2.bias"))?,
        })
    }
}

fn init_branch(store: &mut ParamStore, init: &Initializer, prefix: &str, c: usize, d: usize) {
    for p in ["wq", "wk", "wv"] {
        let name = format!("{prefix}.{p}");
        store.insert(
            &name,
            init.make(
                &name,
                &[c, d],
                Init::Normal {
                    fan_in: c,
                    gain: 1.0,
                },
            ),
            true,
        );
    }
    store.insert(
        format!("{prefix}.mlp.ln.gain"),
        Tensor::full(&[d], 1.0),
        true,
    );
    store.insert(format!("{prefix}.mlp.ln.shift"), Tensor::zeros(&[d]), true);
    let fc1 = format!("{prefix}.mlp.fc1.weight");
    store.insert(
        &fc1,
        init.make(
            &fc1,
            &[d, 2 * d],
            Init::Normal {
                fan_in: d,
                gain: 2.0,
            },
        ),
        true,
    );
    store.insert(
        format!("{prefix}.mlp.fc1.bias"),
        Tensor::zeros(&[2 * d]),
        true,
    );
    let fc2 = format!("{prefix}.mlp.fc2.weight");
    store.insert(
        &fc2,
        init.make(
            &fc2,
            &[2 * d, d],
            Init::Normal {
                fan_in: 2 * d,
                gain: 1.0,
            },
        ),
        true,
    );
    store.insert(format!("{prefix}.mlp.fc2.bias"), Tensor::zeros(&[d]), true);
}

pub fn branch_prefix(level: usize, branch: &str) -> String {
    format!("mce.l{level}.{branch}")
}

/// Creates encoder parameters for every level in use, and the fusion conv.
pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig, init: &Initializer) {
    if !cfg.use_cross_map {
        return;
    }
    let d = cfg.token_dim;
    for &l in cfg.encoder_levels() {
        let c = cfg.width(l);
        init_branch(store, init, &branch_prefix(l, "support"), c, d);
        init_branch(store, init, &branch_prefix(l, "query"), c, d);
    }
    let cf = cfg.cross_channels;
    let weight = init.make_conv_subset(
        "mce.fuse.weight",
        cf,
        2 * 3 * d,
        1,
        &fuse_inputs(cfg),
        FUSE_GAIN,
    );
    store.insert("mce.fuse.weight", weight, true);
    store.insert("mce.fuse.bias", Tensor::zeros(&[cf]), true);
}

/// Variance gain of the fusion conv. Keeps the initial cross map at about
/// the scale of the level-3 query features it is concatenated with.
const FUSE_GAIN: f64 = 0.1;

/// Channels of the full `[support l2,l3,l4 | query l2,l3,l4]` stack that the
/// configured encoder actually produces, in stacking order.
fn fuse_inputs(cfg: &ModelConfig) -> Vec<usize> {
    let d = cfg.token_dim;
    let mut branches = Vec::new();
    if cfg.mce_output != MceOutput::QueryOnly {
        branches.push(0);
    }
    if cfg.mce_output != MceOutput::SupportOnly {
        branches.push(1);
    }
    let mut keep = Vec::new();
    for b in branches {
        for &l in cfg.encoder_levels() {
            let block = b * 3 + (l - 2);
            keep.extend(block * d..(block + 1) * d);
        }
    }
    keep
}

/// `x·W` for tokens `[N×C]` and a projection `[C×d]`.
pub fn project(g: &mut Graph, tokens: Var, w: Var) -> Result<Var> {
    Ok(g.matmul(tokens, w)?)
}

/// Scaled dot-product logits `q·kᵀ/√d`.
pub fn attention_scores(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    Ok(g.scale(s, 1.0 / (d as Real).sqrt()))
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Vec<Var>> {
    if heads == 1 {
        return Ok(vec![x]);
    }
    let d = g.shape(x)[1];
    let dh = d / heads;
    (0..heads).map(|h| Ok(g.slice(x, 1, h * dh, dh)?)).collect()
}

/// Multi-head attention `softmax(q·kᵀ/√d_h + bias)·v`; returns the output
/// and the per-head attention weights.
fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    key_bias: Option<&[Real]>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (qs, ks, vs) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let logits = attention_scores(g, qs[h], ks[h])?;
        let a = g.masked_softmax(logits, key_bias)?;
        outs.push(g.matmul(a, vs[h])?);
        weights.push(a);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    Ok((out, weights))
}

pub fn build_additive_mask(binmask: &Tensor) -> Result<AdditiveMask> {
    AdditiveMask::from_binary(binmask)
}

/// `R_S = softmax(S_q·S_kᵀ/√d + mask)·Q_v`, masking support keys.
pub fn support_branch_attention(
    g: &mut Graph,
    s_q: Var,
    s_k: Var,
    q_v: Var,
    mask: &AdditiveMask,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    attend(g, s_q, s_k, q_v, Some(&mask.bias), heads)
}

/// `R_Q = softmax(Q_q·Q_kᵀ/√d)·(m ⊙ S_v)`, zeroing background support values.
pub fn query_branch_attention(
    g: &mut Graph,
    q_q: Var,
    q_k: Var,
    s_v: Var,
    mask: &AdditiveMask,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let masked = g.scale_rows(s_v, &mask.keep())?;
    attend(g, q_q, q_k, masked, None, heads)
}

/// `fc2(GELU(fc1(LN(r))))`, no residual.
pub fn mlp_block(g: &mut Graph, r: Var, b: &BranchVars) -> Result<Var> {
    let x = g.layer_norm(r, b.ln_gain, b.ln_shift)?;
    let x = g.matmul(x, b.fc1_w)?;
    let x = g.add_row(x, b.fc1_b)?;
    let x = g.gelu(x);
    let x = g.matmul(x, b.fc2_w)?;
    Ok(g.add_row(x, b.fc2_b)?)
}

/// Output of one encoder level, all token-shaped `[N×d]`.
#[derive(Clone, Debug)]
pub struct LevelEncoding {
    /// `R_S`: support-branch attention output.
    pub r_support: Var,
    /// `R_Q`: query-branch attention output.
    pub r_query: Var,
    pub f_support: Var,
    pub f_query: Var,
    /// Per-head support-branch attention weights `[N_S×N_S]`.
    pub support_attention: Vec<Var>,
    /// Per-head query-branch attention weights `[N_Q×N_Q]`.
    pub query_attention: Vec<Var>,
}

/// Encodes one level from support tokens `s` and query tokens `q` (same
/// count) under the support mask.
pub fn encode_level(
    g: &mut Graph,
    s: Var,
    q: Var,
    mask: &AdditiveMask,
    sup: &BranchVars,
    qry: &BranchVars,
    heads: usize,
) -> Result<LevelEncoding> {
    let (ns, nq) = (g.shape(s)[0], g.shape(q)[0]);
    if ns != nq || mask.len() != ns {
        return Err(MceError::contract(
            "mce_forward",
            format!(
                "support tokens {ns}, query tokens {nq}, mask {}",
                mask.len()
            ),
        ));
    }
    let s_q = project(g, s, sup.wq)?;
    let s_k = project(g, s, sup.wk)?;
    let q_v = project(g, q, sup.wv)?;
    let (r_support, support_attention) = support_branch_attention(g, s_q, s_k, q_v, mask, heads)?;

    let q_q = project(g, q, qry.wq)?;
    let q_k = project(g, q, qry.wk)?;
    let s_v = project(g, s, qry.wv)?;
    let (r_query, query_attention) = query_branch_attention(g, q_q, q_k, s_v, mask, heads)?;

    let f_support = mlp_block(g, r_support, sup)?;
    let f_query = mlp_block(g, r_query, qry)?;
    Ok(LevelEncoding {
        r_support,
        r_query,
        f_support,
        f_query,
        support_attention,
        query_attention,
    })
}

/// Runs the encoder over every configured level and fuses the branch
/// outputs into the `C_f×h×w` cross map at level-3 resolution.
/// `support_mask` is the full-resolution binary mask of the shot.
pub fn mce_forward(
    s: &mut Session,
    cfg: &ModelConfig,
    support: &PyramidVars,
    query: &PyramidVars,
    support_mask: &Tensor,
) -> Result<(Var, Vec<LevelEncoding>)> {
    let [_, h, w] = s.g.shape(query.level(3))[..] else {
        return Err(MceError::contract(
            "mce_forward",
            "query level 3 must be C×H×W",
        ));
    };
    let mask = AdditiveMask::from_binary(&downsample_mask(support_mask, 3)?)?;
    let mut encodings = Vec::new();
    for &l in cfg.encoder_levels() {
        let (mut fs, mut fq) = (support.level(l), query.level(l));
        if s.g.shape(fs)[1..] != [h, w] {
            fs = s.g.resize_bilinear(fs, h, w)?;
            fq = s.g.resize_bilinear(fq, h, w)?;
        }
        let st = tokenize(&mut s.g, fs)?;
        let qt = tokenize(&mut s.g, fq)?;
        let sup = BranchVars::bind(s, &branch_prefix(l, "support"))?;
        let qry = BranchVars::bind(s, &branch_prefix(l, "query"))?;
        encodings.push(encode_level(
            &mut s.g, st.var, qt.var, &mask, &sup, &qry, cfg.heads,
        )?);
    }
    let mut maps = Vec::new();
    if cfg.mce_output != MceOutput::QueryOnly {
        for e in &encodings {
            maps.push(untokenize(&mut s.g, e.f_support, h, w)?);
        }
    }
    if cfg.mce_output != MceOutput::SupportOnly {
        for e in &encodings {
            maps.push(untokenize(&mut s.g, e.f_query, h, w)?);
        }
    }
    let stacked = if maps.len() == 1 {
        maps[0]
    } else {
        s.g.concat(&maps, 0)?
    };
    let fw = s.p("mce.fuse.weight")?;
    let fb = s.p("mce.fuse.bias")?;
    let fused = s.g.conv2d(stacked, fw, Some(fb), ConvSpec::same(1, 1))?;
    Ok((fused, encodings))
}
