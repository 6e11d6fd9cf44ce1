use eri_core::autodiff::{
    grad_check, param_grad_check, with_precision, Graph, Module, Precision, Probes, Tensor,
};
use eri_core::nn::{init_rng, Backbone, BackboneConfig, BatchNorm2d, Linear, LstmLayer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn f64_mode<R>(f: impl FnOnce() -> R) -> R {
    with_precision(Precision::F64, f)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---- linear ---------------------------------------------------------------

#[test]
fn linear_identity_weights_pass_input_through() {
    let mut lin = Linear::new("lin", 3, 3, &mut init_rng(0));
    lin.weight.assign(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
    let mut g = Graph::new();
    let x = g.constant(&t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.25, -4.0]));
    let y = lin.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn linear_small_example() {
    let mut lin = Linear::new("lin", 2, 1, &mut init_rng(0));
    lin.weight.assign(&t(&[1, 2], &[1.0, 1.0])).unwrap();
    lin.bias.assign(&t(&[1], &[-1.0])).unwrap();
    let mut g = Graph::new();
    let x = g.constant(&t(&[1, 2], &[2.0, 3.0]));
    let y = lin.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), &[4.0]);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lin = Linear::new("lin", 4, 3, &mut init_rng(1));
    lin.bias.assign(&random(&mut rng, &[3])).unwrap();
    let x = random(&mut rng, &[5, 4]);
    let w = random(&mut rng, &[5, 3]);

    let err = grad_check(std::slice::from_ref(&x), 1e-5, |g, v| {
        let y = lin.forward(g, v[0])?;
        let w = g.constant(&w);
        let p = g.mul(y, w)?;
        Ok(g.sum_all(p))
    })
    .unwrap();
    assert!(err < 1e-6, "input err {err}");

    let rows = param_grad_check(&lin, 1e-5, Probes::All, 1e-8, |g, m| {
        let xv = g.constant(&x);
        let y = m.forward(g, xv)?;
        let w = g.constant(&w);
        let p = g.mul(y, w)?;
        Ok(g.sum_all(p))
    })
    .unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r.max_rel_err < 1e-6, "{} err {}", r.name, r.max_rel_err);
    }
}

// ---- backbone -------------------------------------------------------------

fn conv_out(n: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - kernel) / stride + 1
}

/// Output extent by composing the convolution size formula over the stem and
/// every block's first convolution.
fn composed_shape(cfg: &BackboneConfig) -> (usize, usize) {
    let (_, mut h, mut w) = cfg.input_size;
    h = conv_out(h, 3, 1, 1);
    w = conv_out(w, 3, 1, 1);
    for (stage, &blocks) in cfg.blocks_per_stage.iter().enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            h = conv_out(conv_out(h, 3, stride, 1), 3, 1, 1);
            w = conv_out(conv_out(w, 3, stride, 1), 3, 1, 1);
        }
    }
    (h, w)
}

#[test]
fn default_backbone_maps_32px_frames_to_4x4() {
    let cfg = BackboneConfig::default();
    let net = Backbone::new("bb", &cfg, &mut init_rng(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::no_grad();
    let x = g.constant(&random(&mut rng, &[2, 3, 32, 32]));
    let y = net.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[2, 64, 4, 4]);
    assert_eq!(composed_shape(&cfg), (4, 4));
    assert_eq!(cfg.output_spatial(), (4, 4));
}

#[test]
fn zero_frames_give_bias_only_output() {
    // Conv layers carry no bias and BN betas start at 0, so every weight
    // draw must produce the same (zero) map.
    let cfg = BackboneConfig::default();
    let zeros = Tensor::zeros([2, 3, 32, 32]);
    let outs: Vec<Vec<f64>> = [0, 1]
        .iter()
        .map(|&seed| {
            let net = Backbone::new("bb", &cfg, &mut init_rng(seed)).unwrap();
            let mut g = Graph::no_grad();
            let x = g.constant(&zeros);
            let y = net.forward(&mut g, x).unwrap();
            g.value(y).to_vec()
        })
        .collect();
    assert!(outs[0].iter().all(|v| v.is_finite()));
    assert_eq!(outs[0], outs[1]);
    assert!(outs[0].iter().all(|&v| v == 0.0));
}

#[test]
fn doubling_the_batch_only_changes_the_leading_extent() {
    let cfg = BackboneConfig::default();
    let net = Backbone::new("bb", &cfg, &mut init_rng(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let one = random(&mut rng, &[1, 3, 32, 32]);
    let mut doubled = one.data().to_vec();
    doubled.extend_from_slice(one.data());
    let two = t(&[2, 3, 32, 32], &doubled);

    let mut g = Graph::no_grad();
    let a = g.constant(&one);
    let b = g.constant(&two);
    let ya = net.forward(&mut g, a).unwrap();
    let yb = net.forward(&mut g, b).unwrap();
    assert_eq!(g.shape(ya)[1..], g.shape(yb)[1..]);
    assert_eq!(g.shape(yb)[0], 2);
    let n = g.value(ya).len();
    assert_eq!(&g.value(yb)[..n], g.value(ya));
    assert_eq!(&g.value(yb)[n..], g.value(ya));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backbone_shape_law(
        channels in prop::array::uniform4(1usize..6),
        blocks in prop::array::uniform4(1usize..3),
        c in 1usize..4,
        h in 1usize..20,
        w in 1usize..20,
    ) {
        let cfg = BackboneConfig { stage_channels: channels, blocks_per_stage: blocks, input_size: (c, h, w) };
        let net = Backbone::new("bb", &cfg, &mut init_rng(0)).unwrap();
        let mut g = Graph::no_grad();
        let x = g.constant(&Tensor::full([1, c, h, w], 0.3));
        let y = net.forward(&mut g, x).unwrap();
        let (oh, ow) = composed_shape(&cfg);
        prop_assert_eq!(g.shape(y), &[1, channels[3], oh, ow]);
        prop_assert_eq!(cfg.output_spatial(), (oh, ow));
    }
}

// ---- LSTM -----------------------------------------------------------------

#[test]
fn single_step_equals_one_cell_update_from_zero_state() {
    f64_mode(|| {
        let layer = LstmLayer::new("l", 3, 2, &mut init_rng(4));
        let x = [0.3, -0.7, 1.1];
        let mut g = Graph::new();
        let seq = g.constant(&t(&[1, 1, 3], &x));
        let h = layer.forward(&mut g, seq, &[1]).unwrap();

        let gate = |k: usize, j: usize| -> f64 {
            let w = layer.w[k].tensor.data();
            let b = layer.b[k].tensor.data();
            (0..3).map(|d| w[j * 3 + d] * x[d]).sum::<f64>() + b[j]
        };
        for j in 0..2 {
            let i = sigmoid(gate(0, j));
            let cand = gate(2, j).tanh();
            let o = sigmoid(gate(3, j));
            let expect = o * (i * cand).tanh();
            assert!((g.value(h)[j] - expect).abs() < 1e-12, "unit {j}");
        }
    });
}

#[test]
fn lstm_gradients_through_three_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layer = LstmLayer::new("l", 3, 4, &mut init_rng(8));
    let x = random(&mut rng, &[2, 3, 3]);
    let w = random(&mut rng, &[2, 4]);
    let lengths = [3, 2];
    let loss = |g: &mut Graph, m: &LstmLayer, xv| -> eri_core::Result<_> {
        let h = m.forward(g, xv, &lengths)?;
        let w = g.constant(&w);
        let p = g.mul(h, w)?;
        Ok(g.sum_all(p))
    };
    let err = grad_check(std::slice::from_ref(&x), 1e-5, |g, v| loss(g, &layer, v[0])).unwrap();
    assert!(err < 1e-4, "input err {err}");
    let rows = param_grad_check(&layer, 1e-5, Probes::All, 1e-8, |g, m| {
        let xv = g.constant(&x);
        loss(g, m, xv)
    })
    .unwrap();
    assert_eq!(rows.len(), 12);
    for r in rows {
        assert!(r.max_rel_err < 1e-4, "{} err {}", r.name, r.max_rel_err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Whatever sits past a sequence's length never reaches the output.
    #[test]
    fn padding_beyond_length_is_ignored(
        len in 1usize..5,
        extra in 0usize..4,
        seed in any::<u64>(),
    ) {
        let layer = LstmLayer::new("l", 2, 3, &mut init_rng(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = len + extra;
        let valid: Vec<f64> = (0..len * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pad_a: Vec<f64> = (0..extra * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let seq_a = [valid.clone(), pad_a].concat();
        let seq_b = [valid, vec![0.0; extra * 2]].concat();

        let mut g = Graph::no_grad();
        let both = g.constant(&t(&[2, steps, 2], &[seq_a, seq_b].concat()));
        let h = layer.forward(&mut g, both, &[len, len]).unwrap();
        let v = g.value(h);
        prop_assert_eq!(&v[..3], &v[3..]);
    }
}

// ---- batch norm -----------------------------------------------------------

#[test]
fn train_mode_standardizes_each_channel() {
    f64_mode(|| {
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.training = true;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = random(&mut rng, &[4, 3, 5, 5]);
        for v in x.data_mut() {
            *v = 3.0 * *v + 2.0;
        }
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let y = bn.forward(&mut g, xv).unwrap();
        let y = g.tensor(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..25).map(move |k| (n, k)))
                .map(|(n, k)| y.data()[(n * 3 + c) * 25 + k])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            // eps = 1e-5 in the denominator shrinks the variance slightly
            assert!((var - 1.0).abs() < 1e-5, "channel {c} var {var}");
        }
    });
}

#[test]
fn eval_mode_with_unit_stats_is_affine() {
    f64_mode(|| {
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.assign(&t(&[2], &[2.0, -0.5])).unwrap();
        bn.beta.assign(&t(&[2], &[0.25, 1.0])).unwrap();
        bn.eps = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[2, 2, 3, 3]);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let y = bn.forward(&mut g, xv).unwrap();
        for (i, (&xi, &yi)) in x.data().iter().zip(g.value(y)).enumerate() {
            let c = (i / 9) % 2;
            let expect = [2.0, -0.5][c] * xi + [0.25, 1.0][c];
            assert!((yi - expect).abs() < 1e-12);
        }
    });
}

#[test]
fn batchnorm_train_mode_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bn = BatchNorm2d::new("bn", 2);
    bn.training = true;
    bn.gamma.assign(&random(&mut rng, &[2])).unwrap();
    bn.beta.assign(&random(&mut rng, &[2])).unwrap();
    let x = random(&mut rng, &[3, 2, 2, 2]);
    let w = random(&mut rng, &[3, 2, 2, 2]);
    let loss = |g: &mut Graph, m: &BatchNorm2d, xv| -> eri_core::Result<_> {
        let y = m.forward(g, xv)?;
        let w = g.constant(&w);
        let p = g.mul(y, w)?;
        Ok(g.sum_all(p))
    };
    let err = grad_check(std::slice::from_ref(&x), 1e-5, |g, v| loss(g, &bn, v[0])).unwrap();
    assert!(err < 1e-4, "input err {err}");
    let rows = param_grad_check(&bn, 1e-5, Probes::All, 1e-8, |g, m| {
        let xv = g.constant(&x);
        loss(g, m, xv)
    })
    .unwrap();
    // running statistics are buffers and get no row
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r.max_rel_err < 1e-4, "{} err {}", r.name, r.max_rel_err);
    }
}

#[test]
fn train_mode_updates_running_statistics_on_absorb() {
    let mut bn = BatchNorm2d::new("bn", 1);
    bn.training = true;
    let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]);
    let mut g = Graph::new();
    let xv = g.constant(&x);
    bn.forward(&mut g, xv).unwrap();
    bn.absorb(&g);
    // mean 3, population variance 3.5, momentum 0.1
    assert!((bn.running_mean.tensor.data()[0] - 0.3).abs() < 1e-6);
    assert!((bn.running_var.tensor.data()[0] - (0.9 + 0.35)).abs() < 1e-6);
}
