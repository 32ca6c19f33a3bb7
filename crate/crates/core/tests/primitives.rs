//! Gradient and forward-value oracles for the layer primitives.

mod common;

use common::finite_difference_check;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajectron::nn::*;

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-6;
/// Bound for the randomized-shape property checks.
const PROP_TOL: f64 = 1e-4;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Randomize every parameter so zero-initialized biases also get checked.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
}

fn check<F>(store: &ParamStore, forward: F) -> common::GradCheck
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = forward(&mut tape);
    let grads = tape.gradients(loss).unwrap();
    finite_difference_check(
        store,
        &grads,
        STEP,
        FLOOR,
        |_| true,
        |s| {
            let mut t = Tape::new(s);
            let l = forward(&mut t);
            t.scalar(l)
        },
    )
}

/// Nonlinear scalar readout so gradients are not trivially constant.
fn readout(t: &mut Tape<'_>, y: Var) -> Var {
    let th = t.tanh(y);
    let sq = t.square(th);
    let s1 = t.sum_all(sq);
    let s2 = t.sum_all(y);
    t.add(s1, s2).unwrap()
}

#[test]
fn dense_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let d = Dense::new(
        &mut ParamBuilder::new(&mut store, &mut rng, "theta/d"),
        4,
        3,
        Activation::Tanh,
    )
    .unwrap();
    jitter(&mut store, &mut rng);
    let x = random_matrix(&mut rng, 2, 4);
    let r = check(&store, |t| {
        let xv = t.constant(x.clone());
        let y = d.forward(t, xv).unwrap();
        readout(t, y)
    });
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn lstm_five_step_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let l = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/l"), 3, 4).unwrap();
    jitter(&mut store, &mut rng);
    let xs: Vec<Matrix> = (0..5).map(|_| random_matrix(&mut rng, 2, 3)).collect();
    let r = check(&store, |t| {
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let (h, c) = l.run(t, &vs, None).unwrap();
        let a = readout(t, h);
        let b = readout(t, c);
        t.add(a, b).unwrap()
    });
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn gru_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let g = Gru::new(&mut ParamBuilder::new(&mut store, &mut rng, "psi/g"), 3, 5).unwrap();
    jitter(&mut store, &mut rng);
    let xs: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, 3, 3)).collect();
    let h0 = random_matrix(&mut rng, 3, 5);
    let r = check(&store, |t| {
        let mut h = t.constant(h0.clone());
        for x in &xs {
            let xv = t.constant(x.clone());
            h = g.step(t, xv, h).unwrap();
        }
        readout(t, h)
    });
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn bidirectional_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let b = BiLstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "phi/b"), 2, 3).unwrap();
    jitter(&mut store, &mut rng);
    let xs: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, 2, 2)).collect();
    let masks = [
        ndarray::array![[0.0], [1.0]],
        ndarray::array![[1.0], [1.0]],
        ndarray::array![[1.0], [1.0]],
        ndarray::array![[1.0], [1.0]],
    ];
    let r = check(&store, |t| {
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let ms: Vec<Var> = masks.iter().map(|m| t.constant(m.clone())).collect();
        let y = b.encode(t, &vs, Some(&ms)).unwrap();
        readout(t, y)
    });
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn bidirectional_length_one_uses_same_element_both_ways() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let b = BiLstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/b"), 2, 3).unwrap();
    let x = ndarray::array![[0.7, -0.2]];
    let mut t = Tape::new(&store);
    let xv = t.constant(x.clone());
    let out = b.encode(&mut t, &[xv], None).unwrap();
    let z = t.constant(Matrix::zeros((1, 3)));
    let (hf, _) = b.forward.step(&mut t, xv, z, z).unwrap();
    let (hb, _) = b.backward.step(&mut t, xv, z, z).unwrap();
    let expect = ndarray::concatenate![ndarray::Axis(1), t.value(hf).clone(), t.value(hb).clone()];
    assert_eq!(t.value(out), &expect);
}

/// Direct six-loop cross-correlation.
fn naive_conv(input: &[f64], kernel: &Matrix, bias: &Matrix, g: ConvGeometry) -> Vec<f64> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let mut out = vec![0.0; g.out_len()];
    for oc in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[[0, oc]];
                for c in 0..g.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy * g.stride + ky;
                            let ix = ox * g.stride + kx;
                            acc +=
                                input[c * g.in_h * g.in_w + iy * g.in_w + ix] * kernel[[oc, c * k * k + ky * k + kx]];
                        }
                    }
                }
                out[oc * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_window_sums_to_25() {
    let g = ConvGeometry {
        in_channels: 1,
        in_h: 7,
        in_w: 7,
        out_channels: 1,
        kernel: 5,
        stride: 1,
    };
    let mut store = ParamStore::new();
    let k = store.insert("theta/k", Matrix::ones((1, 25))).unwrap();
    let b = store.insert("theta/b", Matrix::zeros((1, 1))).unwrap();
    let mut t = Tape::new(&store);
    let x = t.constant(Matrix::ones((1, 49)));
    let kv = t.param(k);
    let bv = t.param(b);
    let y = t.conv2d(x, kv, bv, g).unwrap();
    assert_eq!(t.shape(y), (1, 9));
    assert!(t.value(y).iter().all(|v| *v == 25.0));
}

#[test]
fn conv_delta_kernel_is_identity_on_valid_region() {
    let g = ConvGeometry {
        in_channels: 1,
        in_h: 6,
        in_w: 6,
        out_channels: 1,
        kernel: 3,
        stride: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_matrix(&mut rng, 1, 36);
    let mut kernel = Matrix::zeros((1, 9));
    kernel[[0, 4]] = 1.0;
    let mut store = ParamStore::new();
    let k = store.insert("theta/k", kernel).unwrap();
    let b = store.insert("theta/b", Matrix::zeros((1, 1))).unwrap();
    let mut t = Tape::new(&store);
    let x = t.constant(input.clone());
    let kv = t.param(k);
    let bv = t.param(b);
    let y = t.conv2d(x, kv, bv, g).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            assert_eq!(t.value(y)[[0, oy * 4 + ox]], input[[0, (oy + 1) * 6 + ox + 1]]);
        }
    }
}

#[test]
fn conv_rejects_too_small_input() {
    let g = ConvGeometry {
        in_channels: 1,
        in_h: 4,
        in_w: 4,
        out_channels: 1,
        kernel: 5,
        stride: 2,
    };
    assert!(g.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_naive_reference_and_finite_differences(
        seed in 0u64..1000,
        in_channels in 1usize..3,
        out_channels in 1usize..3,
        kernel in 1usize..4,
        stride in 1usize..4,
        extra_h in 0usize..6,
        extra_w in 0usize..6,
    ) {
        let g = ConvGeometry { in_channels, in_h: kernel + extra_h, in_w: kernel + extra_w, out_channels, kernel, stride };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/c"), g, Activation::Tanh).unwrap();
        jitter(&mut store, &mut rng);
        let input = random_matrix(&mut rng, 2, g.in_len());

        let mut t = Tape::new(&store);
        let x = t.constant(input.clone());
        let kv = t.param(conv.kernel);
        let bv = t.param(conv.bias);
        let y = t.conv2d(x, kv, bv, g).unwrap();
        for b in 0..2 {
            let reference = naive_conv(input.row(b).as_slice().unwrap(), store.value(conv.kernel), store.value(conv.bias), g);
            for (got, want) in t.value(y).row(b).iter().zip(&reference) {
                prop_assert!((got - want).abs() < 1e-12);
            }
        }

        let r = check(&store, |t| {
            let x = t.constant(input.clone());
            let y = conv.forward(t, x).unwrap();
            readout(t, y)
        });
        prop_assert!(r.max_rel_err < PROP_TOL, "{:?}", r);
    }

    #[test]
    fn attention_weights_are_direct_softmax_and_gradients_check(
        seed in 0u64..1000,
        keys in 1usize..5,
        batch in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = AdditiveAttention::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/a"), 3, 2, 4).unwrap();
        let q = random_matrix(&mut rng, batch, 3);
        let ks: Vec<Matrix> = (0..keys).map(|_| random_matrix(&mut rng, batch, 2)).collect();
        let mask = Matrix::ones((batch, keys));

        let mut t = Tape::new(&store);
        let qv = t.constant(q.clone());
        let kvs: Vec<Var> = ks.iter().map(|k| t.constant(k.clone())).collect();
        let (ctx, w) = att.forward(&mut t, qv, &kvs, &mask).unwrap();
        let (wq, wk, v) = (store.value(att.w_query), store.value(att.w_key), store.value(att.v));
        for b in 0..batch {
            let scores: Vec<f64> = ks.iter().map(|k| {
                let pre = q.row(b).dot(wq) + k.row(b).dot(wk);
                pre.mapv(f64::tanh).dot(&v.column(0))
            }).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let mut total = 0.0;
            for (j, s) in scores.iter().enumerate() {
                let direct = (s - m).exp() / z;
                let got = t.value(w)[[b, j]];
                prop_assert!(got >= 0.0);
                prop_assert!((got - direct).abs() < 1e-12);
                total += got;
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
            for c in 0..2 {
                let direct: f64 = (0..keys).map(|j| t.value(w)[[b, j]] * ks[j][[b, c]]).sum();
                prop_assert!((t.value(ctx)[[b, c]] - direct).abs() < 1e-12);
            }
        }

        let r = check(&store, |t| {
            let qv = t.constant(q.clone());
            let kvs: Vec<Var> = ks.iter().map(|k| t.constant(k.clone())).collect();
            let (ctx, _) = att.forward(t, qv, &kvs, &mask).unwrap();
            readout(t, ctx)
        });
        prop_assert!(r.max_rel_err < PROP_TOL, "{:?}", r);
    }

    #[test]
    fn dense_and_lstm_gradients_check_over_random_shapes(
        seed in 0u64..1000,
        input in 1usize..5,
        hidden in 1usize..5,
        batch in 1usize..4,
        steps in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/l"), input, hidden).unwrap();
        let d = Dense::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/d"), hidden, 2, Activation::Sigmoid).unwrap();
        jitter(&mut store, &mut rng);
        let xs: Vec<Matrix> = (0..steps).map(|_| random_matrix(&mut rng, batch, input)).collect();
        let r = check(&store, |t| {
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let (h, _) = l.run(t, &vs, None).unwrap();
            let y = d.forward(t, h).unwrap();
            readout(t, y)
        });
        prop_assert!(r.max_rel_err < PROP_TOL, "{:?}", r);
    }
}
