// Checks shared by the integration tests and the acceptance harness. Each
// returns a measured quantity so callers can assert or report on it.
#![allow(dead_code)]

use std::path::Path;

use mce_core::backbone::{FeaturePyramid, PyramidVars};
use mce_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mce_core::config::{MceOutput, ModelConfig};
use mce_core::data::{generate_dataset, Dataset};
use mce_core::episode::{evaluation_episodes, nth_episode, split_folds, test_pool, training_pool};
use mce_core::harness::{episode_view, FeatureCache};
use mce_core::mce::{self, build_additive_mask, AdditiveMask};
use mce_core::metrics::{Confusion, MetricsAccumulator};
use mce_core::params::Session;
use mce_core::prototype;
use mce_core::train::train;
use mce_core::MceModel;
use mce_core::{MceError, RunConfig};
use mce_oracles as oracle;
use mce_tensor::{ConvSpec, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Binary mask with density about `p` and at least one foreground cell.
pub fn binary_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let mut m = Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 });
    let n = m.len();
    m.data_mut()[rng.gen_range(0..n)] = 1.0;
    m
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Loop-oracle comparisons, worst absolute error over `n` random instances.

pub fn matmul_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (m, k, p) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let (a, b) = (uniform(&mut r, &[m, k]), uniform(&mut r, &[k, p]));
        let expect = oracle::matmul(a.data(), b.data(), m, k, p);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        worst = worst.max(max_abs_diff(g.value(c).data(), &expect));
    }
    worst
}

pub fn conv2d_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (c, o) = (r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(3..8), r.gen_range(3..8));
        let k = if r.gen_bool(0.5) { 1 } else { 3 };
        let spec = ConvSpec::strided(k, r.gen_range(1..3), r.gen_range(1..3));
        let x = uniform(&mut r, &[c, h, w]);
        let kernel = uniform(&mut r, &[o, c, k, k]);
        let b = uniform(&mut r, &[o]);
        let (expect, _, _) = oracle::conv2d(
            x.data(),
            c,
            h,
            w,
            kernel.data(),
            o,
            k,
            Some(b.data()),
            spec.stride,
            spec.dilation,
            spec.padding,
        );
        let mut g = Graph::new();
        let (vx, vk, vb) = (g.constant(x), g.constant(kernel), g.constant(b));
        let y = g.conv2d(vx, vk, Some(vb), spec).unwrap();
        worst = worst.max(max_abs_diff(g.value(y).data(), &expect));
    }
    worst
}

pub fn layer_norm_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (t, c) = (r.gen_range(1..6), r.gen_range(2..10));
        let (x, ga, sh) = (
            uniform(&mut r, &[t, c]),
            uniform(&mut r, &[c]),
            uniform(&mut r, &[c]),
        );
        let expect = oracle::layer_norm(x.data(), t, c, ga.data(), sh.data(), 1e-5);
        let mut g = Graph::new();
        let (vx, vg, vs) = (g.constant(x), g.constant(ga), g.constant(sh));
        let y = g.layer_norm(vx, vg, vs).unwrap();
        worst = worst.max(max_abs_diff(g.value(y).data(), &expect));
    }
    worst
}

pub fn bilinear_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (c, h, w) = (r.gen_range(1..3), r.gen_range(1..7), r.gen_range(1..7));
        let (oh, ow) = (r.gen_range(1..10), r.gen_range(1..10));
        let x = uniform(&mut r, &[c, h, w]);
        let expect = oracle::bilinear_resize(x.data(), c, h, w, oh, ow);
        let mut g = Graph::new();
        let vx = g.constant(x);
        let y = g.resize_bilinear(vx, oh, ow).unwrap();
        worst = worst.max(max_abs_diff(g.value(y).data(), &expect));
    }
    worst
}

pub fn map_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (c, h, w) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        let feat = uniform(&mut r, &[c, h, w]);
        let mask = binary_mask(&mut r, &[h, w], 0.4);
        let expect = oracle::masked_average_pool(feat.data(), c, h * w, mask.data());
        let mut g = Graph::new();
        let vf = g.constant(feat);
        let y = prototype::masked_average_pool(&mut g, vf, &mask).unwrap();
        worst = worst.max(max_abs_diff(g.value(y).data(), &expect));
    }
    worst
}

pub fn similarity_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (c, h, w) = (r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..5));
        let qry = uniform(&mut r, &[c, h, w]);
        let mut supp = uniform(&mut r, &[c, h, w]);
        if i % 10 == 0 {
            // A zero support vector exercises the cosine-with-zero rule.
            for ch in 0..c {
                supp.data_mut()[ch * h * w] = 0.0;
            }
        }
        let mask = binary_mask(&mut r, &[h, w], 0.5);
        let expect = oracle::similarity_matrix(qry.data(), supp.data(), c, h * w, mask.data());
        let mut g = Graph::new();
        let (vq, vs) = (g.constant(qry), g.constant(supp));
        let y = prototype::similarity_matrix(&mut g, vq, vs, &mask).unwrap();
        worst = worst.max(max_abs_diff(g.value(y).data(), &expect));
    }
    worst
}

/// Worst difference of per-class IoU, mIoU and FB-IoU against the
/// confusion-matrix oracle.
pub fn metrics_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let pixels = r.gen_range(1..40);
        let episodes: Vec<(usize, Vec<u8>, Vec<u8>)> = (0..r.gen_range(1..12))
            .map(|_| {
                let p = r.gen_range(0.0..1.0);
                let bits =
                    |r: &mut ChaCha8Rng| (0..pixels).map(|_| u8::from(r.gen_bool(p))).collect();
                (r.gen_range(0..4), bits(&mut r), bits(&mut r))
            })
            .collect();
        let (per_class, miou, fbiou) = oracle::segmentation_metrics(&episodes);
        let mut acc = MetricsAccumulator::new();
        for (c, p, t) in &episodes {
            acc.add(*c, p, t);
        }
        let report = acc.report(0);
        assert_eq!(report.per_class_iou.len(), per_class.len());
        for (c, iou) in per_class {
            worst = worst.max((report.per_class_iou[&c] - iou).abs());
        }
        worst = worst.max((report.miou - miou).abs());
        worst = worst.max((report.fbiou - fbiou).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Masking exactness.

pub struct MaskingOutcome {
    /// Largest softmax weight found on any masked support key.
    pub max_masked_weight: f64,
    /// Masked-key weights that were not bitwise +0.
    pub nonzero_masked_weights: usize,
    /// Instances where perturbing background support values changed R_Q.
    pub rq_changes: usize,
    pub instances: usize,
}

/// Random attention instances: checks that the support branch puts exactly
/// zero weight on background keys, and that R_Q is bitwise unchanged when
/// the background rows of the support values are overwritten.
pub fn masking_exactness(seed: u64, n: usize) -> MaskingOutcome {
    let mut r = rng(seed);
    let mut out = MaskingOutcome {
        max_masked_weight: 0.0,
        nonzero_masked_weights: 0,
        rq_changes: 0,
        instances: n,
    };
    for _ in 0..n {
        let tokens = r.gen_range(2..12);
        let heads = r.gen_range(1..3);
        let d = heads * r.gen_range(1..4);
        let scale = [0.1, 1.0, 10.0, 100.0][r.gen_range(0..4)];
        let big = |r: &mut ChaCha8Rng| {
            let mut t = uniform(r, &[tokens, d]);
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
            t
        };
        let (sq, sk, qv) = (big(&mut r), big(&mut r), big(&mut r));
        let (qq, qk, sv) = (big(&mut r), big(&mut r), big(&mut r));
        let density = r.gen_range(0.1..0.9);
        let bin = binary_mask(&mut r, &[tokens], density);
        let mask = build_additive_mask(&bin).unwrap();

        let mut g = Graph::new();
        let (vsq, vsk, vqv) = (g.constant(sq), g.constant(sk), g.constant(qv));
        let (_, weights) =
            mce::support_branch_attention(&mut g, vsq, vsk, vqv, &mask, heads).unwrap();
        for w in weights {
            for (idx, &v) in g.value(w).data().iter().enumerate() {
                if bin.data()[idx % tokens] == 0.0 {
                    out.max_masked_weight = out.max_masked_weight.max(v.abs());
                    if v.to_bits() != 0 {
                        out.nonzero_masked_weights += 1;
                    }
                }
            }
        }

        let rq = |sv: Tensor| {
            let mut g = Graph::new();
            let (a, b, c) = (
                g.constant(qq.clone()),
                g.constant(qk.clone()),
                g.constant(sv),
            );
            let (y, _) = mce::query_branch_attention(&mut g, a, b, c, &mask, heads).unwrap();
            g.value(y)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<u64>>()
        };
        let before = rq(sv.clone());
        let mut perturbed = sv.clone();
        for t in 0..tokens {
            if bin.data()[t] == 0.0 {
                for j in 0..d {
                    perturbed.data_mut()[t * d + j] = r.gen_range(-1e6..1e6);
                }
            }
        }
        if rq(perturbed) != before {
            out.rq_changes += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Straight-line encoder reference.

/// Config of the toy encoder: level 3 is 2×2, so four tokens per image.
pub fn toy_encoder_config(output: MceOutput, multi_level: bool) -> ModelConfig {
    let mut cfg = ModelConfig {
        token_dim: 4,
        cross_channels: 3,
        decoder_channels: 8,
        aspp_branch_channels: 4,
        mce_output: output,
        multi_level,
        ..ModelConfig::default()
    };
    cfg.backbone.widths = [8, 8, 8];
    cfg
}

pub const TOY_IMAGE: usize = 8;

pub fn toy_pyramid(r: &mut ChaCha8Rng, widths: [usize; 3]) -> FeaturePyramid {
    let half = TOY_IMAGE / 2;
    let quarter = TOY_IMAGE / 4;
    FeaturePyramid::new(
        uniform(r, &[widths[0], half, half]),
        uniform(r, &[widths[1], quarter, quarter]),
        uniform(r, &[widths[2], quarter, quarter]),
    )
    .unwrap()
}

fn to_tokens(map: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * c];
    for ch in 0..c {
        for i in 0..n {
            t[i * c + ch] = map[ch * n + i];
        }
    }
    t
}

fn from_tokens(tokens: &[f64], c: usize, n: usize) -> Vec<f64> {
    to_tokens(tokens, n, c)
}

/// The encoder written out step by step with loop oracles: resize, flatten,
/// project, both masked branches, LayerNorm and MLP per branch, stack
/// channels, 1×1 reduction. Single head.
pub fn straight_line_encoder(
    model: &MceModel,
    support: &FeaturePyramid,
    query: &FeaturePyramid,
    support_mask: &Tensor,
) -> Vec<f64> {
    let cfg = &model.cfg;
    assert_eq!(cfg.heads, 1);
    let p = |name: String| model.params.value(&name).unwrap().data().to_vec();
    let [_, h, w] = query.level(3).shape()[..] else {
        panic!()
    };
    let n = h * w;
    let d = cfg.token_dim;

    let [mh, mw] = support_mask.shape()[..] else {
        panic!()
    };
    let keep: Vec<f64> = oracle::bilinear_resize(support_mask.data(), 1, mh, mw, h, w)
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    assert!(
        keep.iter().any(|&k| k == 1.0),
        "toy mask must survive downsampling"
    );
    let live: Vec<bool> = keep.iter().map(|&k| k == 1.0).collect();
    let all = vec![true; n];

    let mlp = |r: &[f64], prefix: &str| {
        let x = oracle::layer_norm(
            r,
            n,
            d,
            &p(format!("{prefix}.mlp.ln.gain")),
            &p(format!("{prefix}.mlp.ln.shift")),
            1e-5,
        );
        let mut x = oracle::matmul(&x, &p(format!("{prefix}.mlp.fc1.weight")), n, d, 2 * d);
        let b1 = p(format!("{prefix}.mlp.fc1.bias"));
        for i in 0..n {
            for j in 0..2 * d {
                x[i * 2 * d + j] = oracle::gelu(x[i * 2 * d + j] + b1[j]);
            }
        }
        let mut y = oracle::matmul(&x, &p(format!("{prefix}.mlp.fc2.weight")), n, 2 * d, d);
        let b2 = p(format!("{prefix}.mlp.fc2.bias"));
        for i in 0..n {
            for j in 0..d {
                y[i * d + j] += b2[j];
            }
        }
        y
    };

    let (mut support_maps, mut query_maps) = (Vec::new(), Vec::new());
    for &l in cfg.encoder_levels() {
        let c = cfg.width(l);
        let resize = |t: &Tensor| {
            let [_, lh, lw] = t.shape()[..] else { panic!() };
            oracle::bilinear_resize(t.data(), c, lh, lw, h, w)
        };
        let s = to_tokens(&resize(support.level(l)), c, n);
        let q = to_tokens(&resize(query.level(l)), c, n);
        let sp = format!("mce.l{l}.support");
        let qp = format!("mce.l{l}.query");

        let s_q = oracle::matmul(&s, &p(format!("{sp}.wq")), n, c, d);
        let s_k = oracle::matmul(&s, &p(format!("{sp}.wk")), n, c, d);
        let q_v = oracle::matmul(&q, &p(format!("{sp}.wv")), n, c, d);
        let r_s = oracle::attention(&s_q, &s_k, &q_v, n, d, d, &live);

        let q_q = oracle::matmul(&q, &p(format!("{qp}.wq")), n, c, d);
        let q_k = oracle::matmul(&q, &p(format!("{qp}.wk")), n, c, d);
        let mut s_v = oracle::matmul(&s, &p(format!("{qp}.wv")), n, c, d);
        for i in 0..n {
            for j in 0..d {
                s_v[i * d + j] *= keep[i];
            }
        }
        let r_q = oracle::attention(&q_q, &q_k, &s_v, n, d, d, &all);

        support_maps.push(from_tokens(&mlp(&r_s, &sp), d, n));
        query_maps.push(from_tokens(&mlp(&r_q, &qp), d, n));
    }
    let mut stacked = Vec::new();
    if cfg.mce_output != MceOutput::QueryOnly {
        support_maps
            .iter()
            .for_each(|m| stacked.extend_from_slice(m));
    }
    if cfg.mce_output != MceOutput::SupportOnly {
        query_maps.iter().for_each(|m| stacked.extend_from_slice(m));
    }
    let cin = stacked.len() / n;
    let (fw, fb) = (p("mce.fuse.weight".into()), p("mce.fuse.bias".into()));
    let cf = fb.len();
    let mut out = vec![0.0; cf * n];
    for o in 0..cf {
        for px in 0..n {
            let mut acc = fb[o];
            for i in 0..cin {
                acc += fw[o * cin + i] * stacked[i * n + px];
            }
            out[o * n + px] = acc;
        }
    }
    out
}

/// Production encoder output for the same inputs.
pub fn encoder_output(
    model: &MceModel,
    support: &FeaturePyramid,
    query: &FeaturePyramid,
    support_mask: &Tensor,
) -> Vec<f64> {
    let mut s = Session::new(&model.params);
    let sv = PyramidVars::constants(&mut s.g, support);
    let qv = PyramidVars::constants(&mut s.g, query);
    let (fused, _) = mce::mce_forward(&mut s, &model.cfg, &sv, &qv, support_mask).unwrap();
    s.g.value(fused).data().to_vec()
}

/// Worst difference between encoder and straight-line reference over
/// `n` random toy episodes, cycling through the output modes.
pub fn straight_line_error(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let modes = [
        MceOutput::Fusion,
        MceOutput::QueryOnly,
        MceOutput::SupportOnly,
    ];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let cfg = toy_encoder_config(modes[i % 3], i % 2 == 0);
        let model = MceModel::new(&cfg, r.gen()).unwrap();
        let support = toy_pyramid(&mut r, cfg.backbone.widths);
        let query = toy_pyramid(&mut r, cfg.backbone.widths);
        // Whole 4×4 blocks map exactly onto single level-3 cells.
        let cells = binary_mask(&mut r, &[2, 2], 0.5);
        let mask = Tensor::from_fn(&[TOY_IMAGE, TOY_IMAGE], |idx| {
            let (y, x) = (idx / TOY_IMAGE, idx % TOY_IMAGE);
            cells.data()[(y / 4) * 2 + x / 4]
        });
        let got = encoder_output(&model, &support, &query, &mask);
        let expect = straight_line_encoder(&model, &support, &query, &mask);
        worst = worst.max(max_abs_diff(&got, &expect));
    }
    worst
}

pub fn additive(bits: &[f64]) -> AdditiveMask {
    build_additive_mask(&Tensor::new(vec![bits.len()], bits.to_vec()).unwrap()).unwrap()
}

// ---------------------------------------------------------------------------
// Episodic protocol.

/// Training samples or sampled training episodes that touch a test class of
/// their fold. The pool scan is exhaustive; `episodes` sampled episodes per
/// fold are checked on top of it.
pub fn leak_violations(data: &Dataset, n_folds: usize, episodes: u64, seed: u64) -> usize {
    let mut bad = 0;
    for split in split_folds(data.n_classes, n_folds).unwrap() {
        let pool = training_pool(data, &split);
        let touches = |i: usize| {
            data.samples[i]
                .present
                .iter()
                .any(|c| split.test_classes.contains(c))
        };
        bad += pool.all_indices().filter(|&i| touches(i)).count();
        let purpose = format!("train.fold{}", split.fold);
        for i in 0..episodes {
            let e = nth_episode(&pool, 1 + (i % 5) as usize, seed, &purpose, i).unwrap();
            if split.test_classes.contains(&e.class_id)
                || e.support.iter().chain([&e.query]).any(|&j| touches(j))
            {
                bad += 1;
            }
        }
    }
    bad
}

/// Random episode confusions accumulated in order and in `shuffles`
/// shuffled orders; counts the shuffles whose report differs.
pub fn order_sensitivity(seed: u64, shuffles: usize) -> usize {
    let mut r = rng(seed);
    let episodes: Vec<(usize, Confusion)> = (0..200)
        .map(|_| {
            let p = r.gen_range(0.0..1.0);
            let bits: Vec<u8> = (0..64).map(|_| u8::from(r.gen_bool(p))).collect();
            let truth: Vec<u8> = (0..64).map(|_| u8::from(r.gen_bool(0.3))).collect();
            (r.gen_range(0..2), Confusion::from_masks(&bits, &truth))
        })
        .collect();
    let report = |order: &[(usize, Confusion)]| {
        let mut acc = MetricsAccumulator::new();
        for (c, conf) in order {
            acc.add_confusion(*c, conf);
        }
        acc.report(seed)
    };
    let reference = report(&episodes);
    let mut shuffled = episodes.clone();
    (0..shuffles)
        .filter(|_| {
            shuffled.shuffle(&mut r);
            report(&shuffled) != reference
        })
        .count()
}

// ---------------------------------------------------------------------------
// Training and persistence.

/// A run small enough for tests: 32-pixel images, few samples per class.
pub fn small_run_config(iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.image_size = 32;
    cfg.dataset.samples_per_class = 12;
    cfg.optim.iterations = iterations;
    cfg.optim.lr = 0.01;
    cfg
}

/// Trains fold 0 of `cfg` from `seed` and returns the dataset and model.
pub fn trained_model(cfg: &RunConfig, seed: u64) -> (Dataset, MceModel) {
    let data = generate_dataset(&cfg.dataset, cfg.protocol.n_classes, seed).unwrap();
    let mut model = MceModel::new(&cfg.model, seed).unwrap();
    let cache = FeatureCache::build(&model, &data).unwrap();
    let split = &split_folds(cfg.protocol.n_classes, cfg.protocol.n_folds).unwrap()[0];
    train(
        &mut model,
        &data,
        Some(&cache),
        split,
        &cfg.optim,
        1,
        seed,
        |_, _| {},
    )
    .unwrap();
    (data, model)
}

pub struct CheckpointOutcome {
    /// Parameters and every predicted probability match after the round trip.
    pub bit_identical: bool,
    pub checksum_rejected: bool,
    pub truncation_rejected: bool,
    pub version_rejected: bool,
}

/// Saves a briefly trained model, reloads it, compares predictions on test
/// episodes, then loads damaged copies of the file.
pub fn checkpoint_round_trip(dir: &Path, seed: u64) -> CheckpointOutcome {
    let cfg = small_run_config(5);
    let (data, model) = trained_model(&cfg, seed);
    let path = dir.join("model.mcec");
    save_checkpoint(&Checkpoint::from_model(&model, &cfg, seed), &path).unwrap();
    let (loaded_cfg, loaded) = load_checkpoint(&path).unwrap().into_model().unwrap();

    let split = &split_folds(8, 4).unwrap()[0];
    let episodes = evaluation_episodes(&test_pool(&data, split), 1, 8, seed, 0).unwrap();
    let same_predictions = episodes.iter().all(|e| {
        let view = episode_view(&data, None, e);
        model.predict(&view).unwrap() == loaded.predict(&view).unwrap()
    });
    let bit_identical = same_predictions && loaded == model && loaded_cfg == cfg;

    let bytes = std::fs::read(&path).unwrap();
    let write = |name: &str, b: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, b).unwrap();
        load_checkpoint(&p)
    };
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x10;
    let mut version = bytes.clone();
    version[4] = version[4].wrapping_add(1);
    CheckpointOutcome {
        bit_identical,
        checksum_rejected: matches!(write("flipped", &flipped), Err(MceError::Checksum { .. })),
        truncation_rejected: matches!(
            write("short", &bytes[..bytes.len() - 100]),
            Err(MceError::Truncated)
        ),
        version_rejected: matches!(write("version", &version), Err(MceError::Version { .. })),
    }
}
