use ndarray::{Array2, IxDyn};
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::rng;

const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed, &[101]);
    let n = shape.iter().product();
    let v = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Audits parameter and input gradients of `layer` under the loss
/// `sum(r ⊙ layer(x))`. The rng is re-seeded on every pass so dropout
/// replays the same mask.
fn audit<L: Layer<f64>>(layer: &mut L, in_shape: &[usize], mode: Mode) -> (GradCheckReport, GradCheckReport) {
    let x = randn(in_shape, 1);
    let out_shape = layer.output_shape(in_shape).unwrap();
    let r = randn(&out_shape, 2);
    let params = gradient_check(
        layer,
        |l| {
            let y = l.forward(&x, mode, &mut rng::seeded(9, &[]))?;
            l.backward(&r)?;
            Ok((&y * &r).sum())
        },
        300,
        3,
    )
    .unwrap();
    let input = input_gradient_check(
        &x,
        |xp| {
            let y = layer.forward(xp, mode, &mut rng::seeded(9, &[]))?;
            let dx = layer.backward(&r)?;
            let mut sig = Vec::new();
            layer.kink_signature(&mut sig);
            Ok(((&y * &r).sum(), dx, sig))
        },
        300,
        4,
    )
    .unwrap();
    layer.zero_grad();
    (params, input)
}

fn assert_audit(name: &str, (p, i): (GradCheckReport, GradCheckReport), has_params: bool) {
    if has_params {
        assert!(p.passes(TOL), "{name} params: {p:?}");
    }
    assert!(i.passes(TOL), "{name} input: {i:?}");
}

fn r() -> Rng {
    rng::seeded(5, &[102])
}

#[test]
fn conv_output_shapes() {
    let mut c: Conv2d<f64> = Conv2d::new(1, 32, 7, 1, &mut r());
    assert_eq!(c.output_shape(&[1, 64, 256]).unwrap(), vec![32, 64, 256]);
    assert_eq!(c.param_count(), 1600);
    let y = c.forward(&Tensor::zeros(IxDyn(&[1, 64, 256])), Mode::Eval, &mut r()).unwrap();
    assert_eq!(y.shape(), &[32, 64, 256]);
    let s: Conv2d<f64> = Conv2d::new(2, 3, 3, 2, &mut r());
    assert_eq!(s.output_shape(&[2, 9, 16]).unwrap(), vec![3, 5, 8]);
    assert!(s.output_shape(&[1, 9, 16]).is_err());
}

#[test]
fn maxpool_output_shape() {
    let mut p = MaxPool2d::new(2, 2);
    let y = Layer::<f64>::forward(&mut p, &randn(&[64, 64, 256], 0), Mode::Eval, &mut r()).unwrap();
    assert_eq!(y.shape(), &[64, 32, 128]);
}

fn check_against_naive_conv(channels: usize, filters: usize) {
    let mut c: Conv2d<f64> = Conv2d::new(channels, filters, 3, 2, &mut r());
    let x = randn(&[channels, 5, 7], 3);
    let y = c.forward(&x, Mode::Eval, &mut r()).unwrap();
    // ceil(5/2)=3, pad (3-1)*2+3-5 = 2 → top 1; ceil(7/2)=4, pad 2 → left 1.
    for f in 0..filters {
        for oi in 0..3 {
            for oj in 0..4 {
                let mut acc = c.bias.value[f];
                for ch in 0..channels {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let i = (oi * 2 + di) as isize - 1;
                            let j = (oj * 2 + dj) as isize - 1;
                            if (0..5).contains(&i) && (0..7).contains(&j) {
                                acc += c.weight.value[[f, ch, di, dj]] * x[[ch, i as usize, j as usize]];
                            }
                        }
                    }
                }
                assert!((y[[f, oi, oj]] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn same_padding_matches_naive_convolution() {
    check_against_naive_conv(2, 3);
    // wide enough for the im2col path
    check_against_naive_conv(9, 8);
}

#[test]
fn every_layer_passes_gradient_audit() {
    assert_audit("conv s1", audit(&mut Conv2d::new(2, 3, 3, 1, &mut r()), &[2, 5, 6], Mode::Eval), true);
    assert_audit("conv s2", audit(&mut Conv2d::new(2, 3, 4, 2, &mut r()), &[2, 7, 6], Mode::Eval), true);
    assert_audit("conv wide s1", audit(&mut Conv2d::new(9, 8, 3, 1, &mut r()), &[9, 4, 5], Mode::Eval), true);
    assert_audit("conv wide s2", audit(&mut Conv2d::new(9, 8, 4, 2, &mut r()), &[9, 5, 6], Mode::Eval), true);
    assert_audit("maxpool", audit(&mut MaxPool2d::new(2, 2), &[2, 6, 8], Mode::Eval), false);
    assert_audit("gap", audit(&mut GlobalAvgPool::default(), &[3, 4, 5], Mode::Eval), false);
    assert_audit("dense 1d", audit(&mut Dense::new(6, 4, Init::He, &mut r()), &[6], Mode::Eval), true);
    assert_audit("dense 2d", audit(&mut Dense::new(6, 4, Init::Xavier, &mut r()), &[5, 6], Mode::Eval), true);
    assert_audit("relu", audit(&mut Relu::default(), &[4, 6], Mode::Eval), false);
    assert_audit("gelu", audit(&mut Gelu::default(), &[4, 6], Mode::Eval), false);
    assert_audit("sigmoid", audit(&mut Sigmoid::default(), &[12], Mode::Eval), false);
    assert_audit("dropout", audit(&mut Dropout::new(0.3), &[40], Mode::Train), false);
    assert_audit("layer norm", audit(&mut LayerNorm::new(6), &[4, 6], Mode::Eval), true);
    let mut ln = LayerNorm::new(6);
    ln.gain.value = randn(&[6], 7);
    ln.shift.value = randn(&[6], 8);
    assert_audit("layer norm affine", audit(&mut ln, &[4, 6], Mode::Eval), true);
    let mut mha = MultiHeadAttention::new(8, 2, &mut r());
    mha.set_mask(Some(vec![true, true, false, true, false]));
    assert_audit("attention", audit(&mut mha, &[5, 8], Mode::Eval), true);
    assert_audit("feed forward", audit(&mut FeedForward::new(6, 10, &mut r()), &[3, 6], Mode::Eval), true);
}

fn tiny_cnn() -> Sequential<f64> {
    let specs = [
        LayerSpec::Conv2d { in_channels: 1, filters: 4, kernel: 3, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { window: 2, stride: 2 },
        LayerSpec::Conv2d { in_channels: 4, filters: 6, kernel: 3, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { inputs: 6, outputs: 1 },
    ];
    Sequential::from_specs(&specs, Init::He, &mut r()).unwrap()
}

#[test]
fn tiny_cnn_passes_gradient_audit() {
    let mut net = tiny_cnn();
    assert!(net.param_count() > 200);
    let x = randn(&[1, 8, 16], 11);
    let report = gradient_check(
        &mut net,
        |m| {
            let z = m.forward(&x, Mode::Eval, &mut r())?;
            let (loss, g) = bce_with_logits(z[0], 1.0);
            m.backward(&Tensor::from_elem(IxDyn(&[1]), g))?;
            Ok(loss)
        },
        200,
        12,
    )
    .unwrap();
    assert!(report.checked + report.skipped == 200);
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn transformer_block_passes_gradient_audit() {
    let mut block: TransformerBlock<f64> = TransformerBlock::new(8, 2, 16, &mut r()).unwrap();
    block.set_mask(Some(vec![true, true, true, true, false]));
    let x = randn(&[5, 8], 13);
    let t = randn(&[5, 8], 14);
    let report = gradient_check(
        &mut block,
        |b| {
            let y = b.forward(&x, Mode::Eval, &mut r())?;
            let d = &y - &t;
            b.backward(&d)?;
            Ok(0.5 * d.mapv(|v| v * v).sum())
        },
        300,
        15,
    )
    .unwrap();
    assert_eq!(report.checked, 300);
    assert!(report.passes(TOL), "{report:?}");
    let input = input_gradient_check(
        &x,
        |xp| {
            let y = block.forward(xp, Mode::Eval, &mut r())?;
            let d = &y - &t;
            let dx = block.backward(&d)?;
            Ok((0.5 * d.mapv(|v| v * v).sum(), dx, Vec::new()))
        },
        40,
        16,
    )
    .unwrap();
    assert!(input.passes(TOL), "{input:?}");
}

#[test]
fn linear_mse_gradient_is_exact() {
    let mut lin: Dense<f64> = Dense::new(4, 3, Init::Xavier, &mut r());
    let x = randn(&[5, 4], 17);
    let t = randn(&[5, 3], 18)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let mask = Array2::from_elem((5, 3), true);
    let report = gradient_check(
        &mut lin,
        |l| {
            let y = l.forward(&x, Mode::Eval, &mut r())?;
            let (loss, g) = masked_mse(&y.into_dimensionality().unwrap(), &t, &mask)?;
            l.backward(&g.into_dyn())?;
            Ok(loss)
        },
        200,
        19,
    )
    .unwrap();
    assert_eq!(report.checked, 15);
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut net = tiny_cnn();
    net.forward(&randn(&[1, 8, 16], 20), Mode::Train, &mut r()).unwrap();
    let dx = net.backward(&Tensor::zeros(IxDyn(&[1]))).unwrap();
    assert!(dx.iter().all(|&v| v == 0.0));
    for p in net.params() {
        assert!(p.grad.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn backward_without_forward_is_an_error() {
    let mut d: Dense<f64> = Dense::new(2, 2, Init::He, &mut r());
    assert!(d.backward(&Tensor::zeros(IxDyn(&[2]))).is_err());
    let mut c: Conv2d<f64> = Conv2d::new(1, 1, 3, 1, &mut r());
    assert!(c.backward(&Tensor::zeros(IxDyn(&[1, 3, 3]))).is_err());
}

#[test]
fn dropout_rate_zero_is_identity() {
    let x = randn(&[50], 21);
    let mut d = Dropout::new(0.0);
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(d.forward(&x, mode, &mut r()).unwrap(), x);
    }
    let mut d = Dropout::new(0.5);
    assert_eq!(d.forward(&x, Mode::Eval, &mut r()).unwrap(), x);
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let x = randn(&[20], 22).mapv(|v| v.abs() + 0.5);
    let mut d = Dropout::new(0.2);
    let mut rr = rng::seeded(23, &[]);
    let mut acc = Tensor::zeros(IxDyn(&[20]));
    for _ in 0..10_000 {
        acc += &d.forward(&x, Mode::Train, &mut rr).unwrap();
    }
    acc /= 10_000.0;
    for (a, b) in acc.iter().zip(x.iter()) {
        assert!((a - b).abs() <= 0.02 * b, "{a} vs {b}");
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut mha: MultiHeadAttention<f64> = MultiHeadAttention::new(8, 4, &mut r());
    let valid = vec![true, false, true, true, false, true];
    mha.set_mask(Some(valid.clone()));
    mha.forward(&randn(&[6, 8], 24).mapv(|v| 3.0 * v), Mode::Eval, &mut r()).unwrap();
    for a in mha.attention_weights().unwrap() {
        for row in a.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            for (j, &w) in row.iter().enumerate() {
                if !valid[j] {
                    assert_eq!(w, 0.0);
                }
            }
        }
    }
    mha.set_mask(Some(vec![false; 6]));
    assert!(mha.forward(&randn(&[6, 8], 24), Mode::Eval, &mut r()).is_err());
}

#[test]
fn padded_frames_do_not_change_valid_outputs() {
    let mut block: TransformerBlock<f64> = TransformerBlock::new(8, 2, 16, &mut r()).unwrap();
    let x = randn(&[4, 8], 25);
    let y = block.forward(&x, Mode::Eval, &mut r()).unwrap();
    let mut padded = randn(&[7, 8], 26);
    padded.slice_mut(ndarray::s![..4, ..]).assign(&x);
    block.set_mask(Some((0..7).map(|i| i < 4).collect()));
    let yp = block.forward(&padded, Mode::Eval, &mut r()).unwrap();
    for i in 0..4 {
        for j in 0..8 {
            assert!((y[[i, j]] - yp[[i, j]]).abs() < 1e-9);
        }
    }
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(3, 4);
    assert_eq!(pe[[0, 0]], 0.0);
    assert_eq!(pe[[0, 1]], 1.0);
    assert!((pe[[2, 0]] - 2f64.sin()).abs() < 1e-15);
    assert!((pe[[1, 3]] - (0.01f64).cos()).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip_through_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let a = Sequential::<f32>::from_specs(&tiny_cnn().specs(), Init::He, &mut rng::seeded(1, &[])).unwrap();
    save_params(&path, &a.params()).unwrap();
    let mut b = Sequential::<f32>::from_specs(&a.specs(), Init::He, &mut rng::seeded(2, &[])).unwrap();
    assert_ne!(a.params()[0].value, b.params()[0].value);
    load_params(&path, &mut b.params_mut()).unwrap();
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn layer_spec_validation_and_counts() {
    assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
    assert!(LayerSpec::Conv2d { in_channels: 1, filters: 1, kernel: 3, stride: 0 }.validate().is_err());
    assert!(LayerSpec::MultiheadAttention { hidden: 10, heads: 3 }.validate().is_err());
    let net = tiny_cnn();
    let from_specs: usize = net.specs().iter().map(|s| s.param_count()).sum();
    assert_eq!(from_specs, net.param_count());
    let mha: MultiHeadAttention<f64> = MultiHeadAttention::new(8, 2, &mut r());
    assert_eq!(mha.spec().param_count(), mha.param_count());
    let json = serde_json::to_string(&net.specs()).unwrap();
    let back: Vec<LayerSpec> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, net.specs());
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut net = Sequential::<f32>::from_specs(&tiny_cnn().specs(), Init::He, &mut rng::seeded(3, &[])).unwrap();
        let mut opt = Adamax::new(1e-2);
        let mut rr = rng::seeded(4, &[]);
        let x = randn(&[1, 8, 16], 30).mapv(|v| v as f32);
        let mut losses = Vec::new();
        for _ in 0..5 {
            let z = net.forward(&x, Mode::Train, &mut rr).unwrap();
            let (l, g) = bce_with_logits(f64::from(z[0]), 1.0);
            net.backward(&Tensor::from_elem(IxDyn(&[1]), g as f32)).unwrap();
            opt.step(&mut net.params_mut()).unwrap();
            net.zero_grad();
            losses.push(l);
        }
        losses
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a[4] < a[0]);
}
