use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::*;
use crate::sample::SubregionSample;
use crate::subregion::pearson_adjacency;

fn dims(w: usize) -> ModelDims {
    ModelDims { w, n_st: 4, n_s: 3, n_t: 2, h: 5, m: 6, h_l: 4, s_d: 3, activation: Activation::Relu }
}

fn random_sample(d: &ModelDims, rng: &mut ChaCha8Rng, target: f64) -> SubregionSample {
    let w2 = d.w2();
    let series = Array2::from_shape_fn((w2, 12), |_| rng.random_range(0..4) as f64);
    SubregionSample {
        center: (0, 0),
        day: 7,
        st: Array3::from_shape_fn((7, w2, d.n_st), |_| rng.random::<f64>() * 2.0 - 1.0),
        temporal: Array2::from_shape_fn((7, d.n_t), |_| rng.random::<f64>() * 2.0 - 1.0),
        spatial: Array2::from_shape_fn((w2, d.n_s), |_| rng.random::<f64>() * 2.0 - 1.0),
        adjacency: pearson_adjacency(&series).unwrap().a,
        target,
    }
}

fn batch_loss(batch: &[SubregionSample], p: &ModelParams) -> f64 {
    let preds: Vec<f64> = batch.iter().map(|s| predict(s, p).unwrap()).collect();
    let targets: Vec<f64> = batch.iter().map(|s| s.target).collect();
    loss_mse(&preds, &targets).unwrap()
}

#[test]
fn loss_examples() {
    assert_eq!(loss_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(loss_mse(&[0.0], &[2.0]).unwrap(), 4.0);
    assert_eq!(loss_mse(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
    assert!(loss_mse(&[], &[]).is_err());
}

#[test]
fn zero_parameters_predict_zero() {
    let d = dims(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = random_sample(&d, &mut rng, 1.0);
    assert_eq!(predict(&s, &ModelParams::zeros(d)).unwrap(), 0.0);
}

#[test]
fn output_layer_is_linear_and_deterministic() {
    let d = dims(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_sample(&d, &mut rng, 1.0);
    let p = ModelParams::init(d, &mut rng);
    let y = predict(&s, &p).unwrap();
    let mut p2 = p.clone();
    p2.fc_out_w *= 2.0;
    assert_eq!(predict(&s, &p2).unwrap(), 2.0 * y);
    assert_eq!(predict(&s, &p).unwrap().to_bits(), y.to_bits());
}

#[test]
fn mismatched_sample_is_rejected() {
    let d = dims(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_sample(&dims(5), &mut rng, 1.0);
    assert!(matches!(predict(&s, &ModelParams::zeros(d)), Err(crate::HintError::Shape { layer: "input", .. })));
}

#[test]
fn zero_residual_has_zero_gradient() {
    let d = dims(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = ModelParams::init(d, &mut rng);
    let mut batch: Vec<_> = (0..3).map(|_| random_sample(&d, &mut rng, 0.0)).collect();
    for s in &mut batch {
        s.target = predict(s, &p).unwrap();
    }
    let (loss, g) = gradients(&batch, &p).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.tensors().iter().all(|t| t.1.iter().all(|&v| v == 0.0)));
}

#[test]
fn linear_spatial_path_matches_hand_derivative() {
    // w = 1 and identity activations: the spatial path is
    // y = wo_s * (Wsp * (a * S * V1) + bsp) + (LSTM term) + bo
    let d = ModelDims { w: 1, n_st: 1, n_s: 1, n_t: 1, h: 1, m: 1, h_l: 1, s_d: 1, activation: Activation::Identity };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = random_sample(&d, &mut rng, 3.0);
    s.adjacency[[0, 0]] = 1.0;
    let p = ModelParams::init(d, &mut rng);
    let y = predict(&s, &p).unwrap();
    let (_, g) = gradients(std::slice::from_ref(&s), &p).unwrap();
    let r2 = 2.0 * (y - s.target);
    let (wo_s, wsp, v1, sv) = (p.fc_out_w[[0, 1]], p.fc_spatial_w[[0, 0]], p.gc_spatial[[0, 0]], s.spatial[[0, 0]]);
    assert!((g.gc_spatial[[0, 0]] - r2 * wo_s * wsp * sv).abs() < 1e-12);
    assert!((g.fc_spatial_w[[0, 0]] - r2 * wo_s * sv * v1).abs() < 1e-12);
    assert!((g.fc_spatial_b[0] - r2 * wo_s).abs() < 1e-12);
    assert!((g.fc_out_b[0] - r2).abs() < 1e-12);
    assert!((g.fc_out_w[[0, 1]] - r2 * (wsp * sv * v1 + p.fc_spatial_b[0])).abs() < 1e-12);
}

/// Central differences on up to `per_tensor` coordinates of every tensor.
fn max_rel_error(batch: &[SubregionSample], p: &ModelParams, per_tensor: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (_, g) = gradients(batch, p).unwrap();
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, (_, gt)) in g.tensors().iter().enumerate() {
        for _ in 0..per_tensor.min(gt.len()) {
            let i = rng.random_range(0..gt.len());
            let mut plus = p.clone();
            plus.tensors_mut()[k].1[i] += step;
            let mut minus = p.clone();
            minus.tensors_mut()[k].1[i] -= step;
            let num = (batch_loss(batch, &plus) - batch_loss(batch, &minus)) / (2.0 * step);
            let rel = (num - gt[i]).abs() / num.abs().max(gt[i].abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    let d = dims(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = ModelParams::init(d, &mut rng);
    let batch: Vec<_> = (0..3)
        .map(|_| {
            let t = rng.random::<f64>() * 4.0;
            random_sample(&d, &mut rng, t)
        })
        .collect();
    let err = max_rel_error(&batch, &p, 20, &mut rng);
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = pearson_adjacency(&Array2::from_shape_fn((4, 10), |_| rng.random_range(0..5) as f64)).unwrap().a;
    let h = Array2::from_shape_fn((8, 3), |_| rng.random::<f64>() - 0.5);
    let w = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() - 0.5);
    let up = Array2::from_shape_fn((8, 2), |_| rng.random::<f64>() - 0.5);
    let obj = |h: &Array2<f64>, w: &Array2<f64>| (gc_forward_cached(h.view(), &a, w, Activation::Relu).unwrap().0 * &up).sum();
    let (_, cache) = gc_forward_cached(h.view(), &a, &w, Activation::Relu).unwrap();
    let mut dw = Array2::zeros((3, 2));
    let dh = gc_backward(&a, &w, &cache, &up, Activation::Relu, &mut dw, true).unwrap();
    let eps = 1e-6;
    for ((i, j), &g) in dw.indexed_iter() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[[i, j]] += eps;
        wm[[i, j]] -= eps;
        let num = (obj(&h, &wp) - obj(&h, &wm)) / (2.0 * eps);
        assert!((num - g).abs() < 1e-8, "dW[{i},{j}] {num} vs {g}");
    }
    for ((i, j), &g) in dh.indexed_iter() {
        let (mut hp, mut hm) = (h.clone(), h.clone());
        hp[[i, j]] += eps;
        hm[[i, j]] -= eps;
        let num = (obj(&hp, &w) - obj(&hm, &w)) / (2.0 * eps);
        assert!((num - g).abs() < 1e-8, "dH[{i},{j}] {num} vs {g}");
    }

    let hl = 3;
    let lw = Array2::from_shape_fn((4 * hl, 2), |_| rng.random::<f64>() - 0.5);
    let lu = Array2::from_shape_fn((4 * hl, hl), |_| rng.random::<f64>() - 0.5);
    let lb = Array1::from_shape_fn(4 * hl, |_| rng.random::<f64>() - 0.5);
    let x = Array1::from_shape_fn(2, |_| rng.random::<f64>() - 0.5);
    let h0 = Array1::from_shape_fn(hl, |_| rng.random::<f64>() - 0.5);
    let c0 = Array1::from_shape_fn(hl, |_| rng.random::<f64>() - 0.5);
    let (uh, uc) = (Array1::from_shape_fn(hl, |_| rng.random::<f64>()), Array1::from_shape_fn(hl, |_| rng.random::<f64>()));
    let lobj = |lw: &Array2<f64>, x: &Array1<f64>, c0: &Array1<f64>| {
        let (h, c) = lstm_step(x.view(), h0.view(), c0.view(), LstmWeights { w: lw, u: &lu, b: &lb }).unwrap();
        (&h * &uh).sum() + (&c * &uc).sum()
    };
    let (_, _, cache) = lstm_step_cached(x.view(), h0.view(), c0.view(), LstmWeights { w: &lw, u: &lu, b: &lb }).unwrap();
    let (mut gw, mut gu, mut gb) = (Array2::zeros(lw.raw_dim()), Array2::zeros(lu.raw_dim()), Array1::zeros(lb.len()));
    let (dx, _, dc0) = lstm_step_backward(
        &cache,
        LstmWeights { w: &lw, u: &lu, b: &lb },
        uh.view(),
        uc.view(),
        &mut LstmGrads { w: &mut gw, u: &mut gu, b: &mut gb },
    );
    for ((i, j), &g) in gw.indexed_iter() {
        let (mut p, mut m) = (lw.clone(), lw.clone());
        p[[i, j]] += eps;
        m[[i, j]] -= eps;
        let num = (lobj(&p, &x, &c0) - lobj(&m, &x, &c0)) / (2.0 * eps);
        assert!((num - g).abs() < 1e-8, "dW[{i},{j}] {num} vs {g}");
    }
    for i in 0..2 {
        let (mut p, mut m) = (x.clone(), x.clone());
        p[i] += eps;
        m[i] -= eps;
        let num = (lobj(&lw, &p, &c0) - lobj(&lw, &m, &c0)) / (2.0 * eps);
        assert!((num - dx[i]).abs() < 1e-8);
    }
    for i in 0..hl {
        let (mut p, mut m) = (c0.clone(), c0.clone());
        p[i] += eps;
        m[i] -= eps;
        let num = (lobj(&lw, &x, &p) - lobj(&lw, &x, &m)) / (2.0 * eps);
        assert!((num - dc0[i]).abs() < 1e-8);
    }
}

#[test]
fn parameter_count_is_independent_of_grid() {
    use crate::features::{Channel, FeatureSet};
    use crate::grid::{AccidentTensor, RoadMask};
    use crate::sample::{Dataset, SampleKey};
    use ndarray::Array4;

    let hyper = HyperParams::default();
    let mut counts = Vec::new();
    for (rows, cols) in [(16, 16), (128, 64)] {
        let mut rng = ChaCha8Rng::seed_from_u64(rows as u64);
        let days = 10;
        let features = FeatureSet {
            spatial: Array3::from_shape_fn((rows, cols, 29), |_| rng.random::<f64>()),
            temporal: Array2::from_shape_fn((days, 5), |_| rng.random::<f64>()),
            st: Array4::from_shape_fn((rows, cols, days, 13), |_| rng.random::<f64>()),
            spatial_channels: (0..29).map(|i| Channel::new(format!("s{i}"), false)).collect(),
            temporal_channels: (0..5).map(|i| Channel::new(format!("t{i}"), false)).collect(),
            st_channels: (0..13).map(|i| Channel::new(format!("x{i}"), false)).collect(),
        };
        let c = AccidentTensor { counts: Array3::from_shape_fn((rows, cols, days), |_| rng.random_range(0..3)) };
        let ds = Dataset::new(c, features, RoadMask::full(rows, cols), hyper.w, &(0..8).collect::<Vec<_>>()).unwrap();
        let d = hyper.dims(ds.features.n_st(), ds.features.n_spatial(), ds.features.n_temporal());
        let p = ModelParams::init(d, &mut rng);
        let sample = ds.sample(SampleKey { center: (rows / 2, cols / 2), day: 9 }).unwrap();
        assert!(predict(&sample, &p).unwrap().is_finite());
        counts.push(p.n_params());
    }
    assert_eq!(counts[0], counts[1]);
}

fn train_set(d: &ModelDims, n: usize, seed: u64) -> Vec<SubregionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = rng.random_range(0..4) as f64;
            random_sample(d, &mut rng, t)
        })
        .collect()
}

fn small_hyper() -> HyperParams {
    HyperParams { w: 3, h: 5, h_l: 4, s_d: 3, lstm_input: 6, batch_size: 4, epochs: 5, ..HyperParams::default() }
}

#[test]
fn single_sample_overfits() {
    let hyper = HyperParams { learning_rate: 0.05, epochs: 400, patience: 400, batch_size: 1, ..small_hyper() };
    let d = hyper.dims(4, 3, 2);
    let data = train_set(&d, 1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (p, report) = train_level(&data, None, ModelParams::init(d, &mut rng), &hyper).unwrap();
    assert!(report.train_loss.last().unwrap() < &1e-3);
    assert!(evaluate_mse(&data, &p).unwrap() < 1e-3);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let hyper = HyperParams { learning_rate: 0.0, ..small_hyper() };
    let d = hyper.dims(4, 3, 2);
    let (train, val) = (train_set(&d, 10, 8), train_set(&d, 5, 9));
    let init = ModelParams::init(d, &mut ChaCha8Rng::seed_from_u64(0));
    let (p, report) = train_level(&train, Some(&val), init.clone(), &hyper).unwrap();
    assert!(p.bit_identical(&init));
    assert!(report.val_loss.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn same_seed_same_report() {
    let hyper = HyperParams { learning_rate: 0.01, ..small_hyper() };
    let d = hyper.dims(4, 3, 2);
    let (train, val) = (train_set(&d, 20, 10), train_set(&d, 6, 11));
    let init = ModelParams::init(d, &mut ChaCha8Rng::seed_from_u64(0));
    let (p1, r1) = train_level(&train, Some(&val), init.clone(), &hyper).unwrap();
    let (p2, r2) = train_level(&train, Some(&val), init, &hyper).unwrap();
    assert!(p1.bit_identical(&p2));
    assert_eq!(r1.timeless(), r2.timeless());
    assert!(r1.val_loss.iter().all(|&v| r1.best_val_loss <= v));
}

#[test]
fn empty_training_set_is_an_error() {
    let hyper = small_hyper();
    let d = hyper.dims(4, 3, 2);
    let empty: Vec<SubregionSample> = Vec::new();
    assert!(train_level(&empty, None, ModelParams::zeros(d), &hyper).is_err());
}

#[test]
fn divergence_aborts() {
    let hyper = HyperParams { learning_rate: 1e3, ..small_hyper() };
    let d = hyper.dims(4, 3, 2);
    let mut train = train_set(&d, 8, 12);
    for s in &mut train {
        s.target = 1e4;
    }
    let init = ModelParams::init(d, &mut ChaCha8Rng::seed_from_u64(0));
    let err = train_level(&train, None, init, &hyper).unwrap_err();
    assert!(matches!(err, crate::HintError::Diverged { .. } | crate::HintError::NonFinite(_)), "{err}");
}

#[test]
fn convex_head_loss_never_increases() {
    // identity activations with only the output layer trained is least
    // squares; full-batch descent with a small step is monotone
    let hyper = HyperParams {
        learning_rate: 1e-4,
        activation: Activation::Identity,
        train_head_only: true,
        batch_size: 32,
        epochs: 30,
        patience: 30,
        ..small_hyper()
    };
    let d = hyper.dims(4, 3, 2);
    let train = train_set(&d, 32, 13);
    let init = ModelParams::init(d, &mut ChaCha8Rng::seed_from_u64(1));
    let (p, report) = train_level(&train, None, init.clone(), &hyper).unwrap();
    assert!(report.train_loss.windows(2).all(|w| w[1] <= w[0]), "{:?}", report.train_loss);
    assert!(report.train_loss.last() < report.train_loss.first());
    assert!(p.gc_st_1 == init.gc_st_1 && p.fc_out_w != init.fc_out_w);
}
