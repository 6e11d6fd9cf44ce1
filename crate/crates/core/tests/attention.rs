use eri_core::attention::{AttentionBlock, CrossAttentionHead};
use eri_core::autodiff::{grad_check, param_grad_check, with_precision, Graph, Precision, Probes, Tensor};
use eri_core::nn::init_rng;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gap(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let plane = s[2] * s[3];
    x.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect()
}

#[test]
fn saturated_gates_reduce_to_average_pooling() {
    with_precision(Precision::F64, || {
        let mut head = CrossAttentionHead::new("h", 8, 2, &mut init_rng(0)).unwrap();
        head.spatial_map.weight.assign(&Tensor::zeros([1, 4, 3, 3])).unwrap();
        head.spatial_map.bias.as_mut().unwrap().assign(&Tensor::full([1, 1, 1], 20.0)).unwrap();
        head.channel_excite.weight.assign(&Tensor::zeros([8, 4])).unwrap();
        head.channel_excite.bias.assign(&Tensor::full([8], 20.0)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fmap = random(&mut rng, &[2, 8, 4, 4]);
        let mut g = Graph::no_grad();
        let x = g.constant(&fmap);
        let y = head.forward(&mut g, x).unwrap();
        let s = 1.0 / (1.0 + (-20.0f64).exp());
        for (out, pooled) in g.value(y).iter().zip(gap(&fmap)) {
            assert!((out - pooled * s * s).abs() < 1e-12);
            assert!((out - pooled).abs() < 1e-8);
        }
    });
}

#[test]
fn zero_feature_map_gives_zero_output() {
    let block = AttentionBlock::new("b", 8, 3, 4, &mut init_rng(2)).unwrap();
    let mut g = Graph::no_grad();
    let x = g.constant(&Tensor::zeros([3, 8, 4, 4]));
    let y = block.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[3, 8]);
    assert!(g.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn head_gradients_match_finite_differences() {
    let head = CrossAttentionHead::new("h", 8, 2, &mut init_rng(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fmap = random(&mut rng, &[2, 8, 3, 3]);
    let w = random(&mut rng, &[2, 8]);
    let loss = |g: &mut Graph, m: &CrossAttentionHead, x| -> eri_core::Result<_> {
        let y = m.forward(g, x)?;
        let w = g.constant(&w);
        let p = g.mul(y, w)?;
        Ok(g.sum_all(p))
    };
    let err = grad_check(std::slice::from_ref(&fmap), 1e-5, |g, v| loss(g, &head, v[0])).unwrap();
    assert!(err < 1e-4, "input err {err}");
    let rows = param_grad_check(&head, 1e-5, Probes::All, 1e-8, |g, m| {
        let x = g.constant(&fmap);
        loss(g, m, x)
    })
    .unwrap();
    assert_eq!(rows.len(), 8);
    for r in rows {
        assert!(r.max_rel_err < 1e-4, "{} err {}", r.name, r.max_rel_err);
    }
}

#[test]
fn single_head_block_equals_the_head() {
    let head = CrossAttentionHead::new("h", 8, 4, &mut init_rng(5)).unwrap();
    let block = AttentionBlock::from_heads(vec![head.clone()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::no_grad();
    let x = g.constant(&random(&mut rng, &[2, 8, 4, 4]));
    let a = head.forward(&mut g, x).unwrap();
    let b = block.forward(&mut g, x).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn two_identical_heads_double_the_output() {
    let head = CrossAttentionHead::new("h", 8, 4, &mut init_rng(7)).unwrap();
    let block = AttentionBlock::from_heads(vec![head.clone(), head.clone()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::no_grad();
    let x = g.constant(&random(&mut rng, &[2, 8, 4, 4]));
    let a = head.forward(&mut g, x).unwrap();
    let b = block.forward(&mut g, x).unwrap();
    for (single, sum) in g.value(a).iter().zip(g.value(b)) {
        assert_eq!(2.0 * single, *sum);
    }
}

#[test]
fn reduction_must_divide_channels() {
    assert!(CrossAttentionHead::new("h", 8, 3, &mut init_rng(0)).is_err());
    assert!(AttentionBlock::new("b", 8, 0, 2, &mut init_rng(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn block_output_is_batch_by_channels(
        inner in 1usize..4,
        reduction in 1usize..4,
        heads in 1usize..4,
        n in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        seed in any::<u64>(),
    ) {
        let c = inner * reduction;
        let block = AttentionBlock::new("b", c, heads, reduction, &mut init_rng(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::no_grad();
        let x = g.constant(&random(&mut rng, &[n, c, h, w]));
        let y = block.forward(&mut g, x).unwrap();
        prop_assert_eq!(g.shape(y), &[n, c]);
        prop_assert_eq!(block.output_dim(), c);
    }
}
