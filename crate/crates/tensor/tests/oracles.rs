mod common;

use common::{rng, uniform};
use mce_oracles as oracle;
use mce_tensor::{ConvSpec, Graph, Tensor};
use rand::Rng;

#[test]
fn matmul_small_cases() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let c = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let q = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
    let z = g.matmul(p, q).unwrap();
    assert_eq!(g.value(z).data(), &[0.0; 4]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..100 {
        let (m, k, n) = (r.gen_range(1..8), r.gen_range(1..8), r.gen_range(1..8));
        let (a, b) = (uniform(&mut r, &[m, k]), uniform(&mut r, &[k, n]));
        let expect = oracle::matmul(a.data(), b.data(), m, k, n);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        let diff = g
            .value(c)
            .data()
            .iter()
            .zip(&expect)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "diff {diff}");
    }
}

#[test]
fn conv2d_small_cases() {
    let mut r = rng(2);
    let x = uniform(&mut r, &[1, 4, 5]);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let one = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(vx, one, None, ConvSpec::same(1, 1)).unwrap();
    assert_eq!(g.value(y), &x);

    let zeros = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
    let z = g.conv2d(vx, zeros, None, ConvSpec::same(3, 1)).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(z), &[2, 4, 5]);

    let five = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(
        g.conv2d(vx, five, None, ConvSpec::same(5, 1)),
        Err(mce_tensor::TensorError::UnsupportedKernel(5, 5))
    ));
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = rng(3);
    // The pinned example: 2×5×5 input, 3×3 kernel, dilation 2.
    let x = uniform(&mut r, &[2, 5, 5]);
    let w = uniform(&mut r, &[3, 2, 3, 3]);
    let (expect, _, _) = oracle::conv2d(x.data(), 2, 5, 5, w.data(), 3, 3, None, 1, 2, 2);
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x), g.constant(w));
    let y = g.conv2d(vx, vw, None, ConvSpec::same(3, 2)).unwrap();
    assert_eq!(g.shape(y), &[3, 5, 5]);
    let diff = g
        .value(y)
        .data()
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-12);

    for _ in 0..100 {
        let c = r.gen_range(1..4);
        let o = r.gen_range(1..4);
        let (h, wd) = (r.gen_range(3..8), r.gen_range(3..8));
        let k = if r.gen_bool(0.5) { 1 } else { 3 };
        let dil = r.gen_range(1..3);
        let stride = r.gen_range(1..3);
        let spec = ConvSpec::strided(k, stride, dil);
        let x = uniform(&mut r, &[c, h, wd]);
        let w = uniform(&mut r, &[o, c, k, k]);
        let b = uniform(&mut r, &[o]);
        let (expect, oh, ow) = oracle::conv2d(
            x.data(),
            c,
            h,
            wd,
            w.data(),
            o,
            k,
            Some(b.data()),
            stride,
            dil,
            spec.padding,
        );
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x), g.constant(w), g.constant(b));
        let y = g.conv2d(vx, vw, Some(vb), spec).unwrap();
        assert_eq!(g.shape(y), &[o, oh, ow]);
        let diff = g
            .value(y)
            .data()
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10, "diff {diff}");
    }
}

#[test]
fn layer_norm_small_cases() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let shift = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::full(&[1, 4], 1.0));
    let y = g.layer_norm(x, gain, shift).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let gain = g.constant(Tensor::full(&[2], 1.0));
    let shift = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap());
    let y = g.layer_norm(x, gain, shift).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    let out = g.value(y).data();
    assert!((out[0] + expect).abs() < 1e-15 && (out[1] - expect).abs() < 1e-15);
}

#[test]
fn layer_norm_statistics_and_oracle() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[3, 8]);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let gain = g.constant(Tensor::full(&[8], 1.0));
    let shift = g.constant(Tensor::zeros(&[8]));
    let y = g.layer_norm(vx, gain, shift).unwrap();
    for (row, src) in g.value(y).data().chunks(8).zip(x.data().chunks(8)) {
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let src_mean: f64 = src.iter().sum::<f64>() / 8.0;
        let src_var: f64 = src.iter().map(|v| (v - src_mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-10);
        // eps sits inside the square root, so unit variance is reached only up to var/(var+eps).
        assert!(
            (var - src_var / (src_var + 1e-5)).abs() <= 1e-10,
            "var {var}"
        );
        assert!((var - 1.0).abs() <= 1e-5 / src_var + 1e-10);
    }

    for _ in 0..100 {
        let (t, c) = (r.gen_range(1..6), r.gen_range(2..10));
        let x = uniform(&mut r, &[t, c]);
        let ga = uniform(&mut r, &[c]);
        let sh = uniform(&mut r, &[c]);
        let expect = oracle::layer_norm(x.data(), t, c, ga.data(), sh.data(), 1e-5);
        let mut g = Graph::new();
        let (vx, vg, vs) = (g.constant(x), g.constant(ga), g.constant(sh));
        let y = g.layer_norm(vx, vg, vs).unwrap();
        let diff = g
            .value(y)
            .data()
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10);
    }
}

#[test]
fn gelu_reference_points() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0, 12.0, 1.0]).unwrap());
    let y = g.gelu(x);
    let out = g.value(y).data();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 12.0).abs() < 1e-12);
    assert!(
        (out[2] - oracle::gelu(1.0)).abs() <= 1e-12,
        "{} vs {}",
        out[2],
        oracle::gelu(1.0)
    );
}

#[test]
fn bilinear_resize_cases() {
    let mut r = rng(5);
    let x = uniform(&mut r, &[2, 3, 4]);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let same = g.resize_bilinear(vx, 3, 4).unwrap();
    assert_eq!(g.value(same), &x);

    let c = g.constant(Tensor::full(&[1, 3, 3], 0.7));
    let up = g.resize_bilinear(c, 7, 5).unwrap();
    assert!(g.value(up).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    // [[0,1],[0,1]] widened to 2×4: source x = (d+0.5)/2 - 0.5 clamped to [0, 1].
    let two = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let wide = g.resize_bilinear(two, 2, 4).unwrap();
    assert_eq!(
        g.value(wide).data(),
        &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]
    );

    for _ in 0..100 {
        let (c, h, w) = (r.gen_range(1..3), r.gen_range(1..7), r.gen_range(1..7));
        let (oh, ow) = (r.gen_range(1..10), r.gen_range(1..10));
        let x = uniform(&mut r, &[c, h, w]);
        let expect = oracle::bilinear_resize(x.data(), c, h, w, oh, ow);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = g.resize_bilinear(vx, oh, ow).unwrap();
        let out = g.value(y).data();
        let diff = out
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10);
        for ch in 0..c {
            let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(out[ch * oh * ow..(ch + 1) * oh * ow]
                .iter()
                .all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
        }
    }
}

#[test]
fn masked_softmax_cases() {
    let ninf = f64::NEG_INFINITY;
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let y = g.masked_softmax(x, Some(&[0.0, ninf, ninf])).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);

    let x = g.constant(Tensor::zeros(&[1, 2]));
    let y = g.masked_softmax(x, None).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap());
    let y = g.masked_softmax(x, None).unwrap();
    let out = g.value(y).data();
    assert!((out[0] - 2.0 / 3.0).abs() < 1e-15 && (out[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = g.constant(Tensor::full(&[2, 2], 3.0));
    let y = g.masked_softmax(x, Some(&[ninf, ninf])).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let x = g.constant(Tensor::zeros(&[1, 2]));
    assert!(g.masked_softmax(x, Some(&[0.0, -1.0])).is_err());
}

#[test]
fn masked_softmax_matches_direct_rows() {
    let mut r = rng(6);
    for _ in 0..100 {
        let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..9));
        let x = uniform(&mut r, &[rows, cols]);
        let live: Vec<bool> = (0..cols).map(|_| r.gen_bool(0.6)).collect();
        let bias: Vec<f64> = live
            .iter()
            .map(|&l| if l { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = g.masked_softmax(vx, Some(&bias)).unwrap();
        for (i, row) in g.value(y).data().chunks(cols).enumerate() {
            let expect = oracle::softmax_row(&x.data()[i * cols..(i + 1) * cols], &live);
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn structural_ops_match_direct_indexing() {
    let mut r = rng(7);
    let a = uniform(&mut r, &[2, 3, 4]);
    let b = uniform(&mut r, &[2, 3, 4]);
    let v = uniform(&mut r, &[4]);
    let mut g = Graph::new();
    let (va, vb, vv) = (
        g.constant(a.clone()),
        g.constant(b.clone()),
        g.constant(v.clone()),
    );

    let sum = g.add(va, vb).unwrap();
    let prod = g.mul(va, vb).unwrap();
    let sc = g.scale(va, -2.5);
    for i in 0..a.len() {
        assert_eq!(g.value(sum).data()[i], a.data()[i] + b.data()[i]);
        assert_eq!(g.value(prod).data()[i], a.data()[i] * b.data()[i]);
        assert_eq!(g.value(sc).data()[i], a.data()[i] * -2.5);
    }

    let cat = g.concat(&[va, vb], 0).unwrap();
    assert_eq!(g.shape(cat), &[4, 3, 4]);
    assert_eq!(g.value(cat).at(&[3, 2, 1]), b.at(&[1, 2, 1]));
    let cat1 = g.concat(&[va, vb], 1).unwrap();
    assert_eq!(g.value(cat1).at(&[1, 4, 2]), b.at(&[1, 1, 2]));

    let t = g.transpose(va).unwrap();
    assert_eq!(g.shape(t), &[2, 4, 3]);
    assert_eq!(g.value(t).at(&[1, 3, 2]), a.at(&[1, 2, 3]));

    let m = g.mean_axis(va, 1).unwrap();
    assert_eq!(g.shape(m), &[2, 4]);
    let expect = (a.at(&[1, 0, 2]) + a.at(&[1, 1, 2]) + a.at(&[1, 2, 2])) / 3.0;
    assert!((g.value(m).at(&[1, 2]) - expect).abs() < 1e-15);

    let s = g.slice(va, 2, 1, 2).unwrap();
    assert_eq!(g.value(s).at(&[1, 2, 1]), a.at(&[1, 2, 2]));

    let flat = g.reshape(va, &[6, 4]).unwrap();
    let row = g.add_row(flat, vv).unwrap();
    assert_eq!(g.value(row).at(&[5, 3]), a.at(&[1, 2, 3]) + v.at(&[3]));

    let bs = g.broadcast_spatial(vv, 2, 3).unwrap();
    assert_eq!(g.value(bs).at(&[2, 1, 2]), v.at(&[2]));
}
