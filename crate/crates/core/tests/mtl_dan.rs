use eri_core::autodiff::{Graph, Module, Tensor};
use eri_core::data::Batch;
use eri_core::eri_head::{parameter_digest, EriHead, EriHeadConfig, EriTrainer};
use eri_core::metrics::{LossKind, NUM_CATEGORIES};
use eri_core::mtl_dan::{
    expr_accuracy, DescriptorMode, EmotionDescriptor, MtlBatch, MtlDanConfig, MtlDanModel, MtlPretrainer, AU_DIM,
    DESCRIPTOR_DIM, EXPR_DIM, VA_DIM,
};
use eri_core::nn::BackboneConfig;
use eri_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> MtlDanConfig {
    MtlDanConfig {
        backbone: BackboneConfig {
            stage_channels: [4, 4, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            input_size: (3, 8, 8),
        },
        attention_heads: 2,
        attention_reduction: 2,
    }
}

fn frames(rng: &mut ChaCha8Rng, n: usize, (c, h, w): (usize, usize, usize)) -> Tensor {
    Tensor::from_vec([n, c, h, w], (0..n * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn default_heads_read_three_feature_widths() {
    let cfg = MtlDanConfig::default();
    let model = MtlDanModel::new(&cfg, 0).unwrap();
    assert_eq!(cfg.backbone.feature_dim(), 64);
    for (head, out) in [(&model.head_expr, EXPR_DIM), (&model.head_au, AU_DIM), (&model.head_va, VA_DIM)] {
        assert_eq!(head.in_dim(), 192);
        assert_eq!(head.out_dim(), out);
    }
    assert_eq!(DESCRIPTOR_DIM, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = model.extract(&frames(&mut rng, 2, (3, 32, 32)), DescriptorMode::Activated).unwrap();
    assert_eq!(d.shape(), &[2, 22]);
}

#[test]
fn identical_frames_get_identical_descriptors() {
    let model = MtlDanModel::new(&small(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = frames(&mut rng, 1, (3, 8, 8));
    let pair = Tensor::from_vec([2, 3, 8, 8], [one.data(), one.data()].concat()).unwrap();
    let d = model.extract(&pair, DescriptorMode::Activated).unwrap();
    assert_eq!(&d.data()[..22], &d.data()[22..]);
}

#[test]
fn frozen_eval_forward_is_bit_deterministic() {
    let mut model = MtlDanModel::new(&small(), 2).unwrap();
    model.set_frozen(true);
    let x = frames(&mut ChaCha8Rng::seed_from_u64(2), 4, (3, 8, 8));
    let a = model.extract(&x, DescriptorMode::Logits).unwrap();
    let b = model.extract(&x, DescriptorMode::Logits).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn descriptor_concat_order_is_expr_au_va() {
    let model = MtlDanModel::new(&small(), 3).unwrap();
    let x = frames(&mut ChaCha8Rng::seed_from_u64(3), 2, (3, 8, 8));
    let mut g = Graph::no_grad();
    let xv = g.constant(&x);
    let out = model.forward(&mut g, xv).unwrap();
    let d = model.descriptor(&mut g, &out, DescriptorMode::Activated).unwrap();
    let row = &g.value(d)[..22];
    assert_eq!(&row[..8], &g.value(out.expr)[..8]);
    assert_eq!(&row[8..20], &g.value(out.au)[..12]);
    assert_eq!(&row[20..], &g.value(out.va)[..2]);
    let parsed = EmotionDescriptor::from_concat(row).unwrap();
    assert_eq!(parsed.concat().as_slice(), row);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn activated_descriptor_ranges(seed in any::<u64>()) {
        let model = MtlDanModel::new(&small(), seed).unwrap();
        let x = frames(&mut ChaCha8Rng::seed_from_u64(seed), 3, (3, 8, 8));
        for d in model.extract_descriptors(&x, DescriptorMode::Activated).unwrap() {
            prop_assert!((d.v_expr.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            prop_assert!(d.v_expr.iter().all(|&v| v >= 0.0));
            prop_assert!(d.v_au.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(d.v_va.iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }
}

// ---- routing --------------------------------------------------------------

fn attention_grad_norm(model: &MtlDanModel, g: &Graph) -> f64 {
    let mut total = 0.0;
    for p in model.attn_expr.parameters().into_iter().chain(model.attn_au.parameters()) {
        if let Some(grad) = g.param_grad(p.id()) {
            total += grad.iter().map(|v| v * v).sum::<f64>();
        }
    }
    total.sqrt()
}

#[test]
fn pooled_path_bypasses_attention_but_va_head_does_not() {
    let model = MtlDanModel::new(&small(), 4).unwrap();
    let x = frames(&mut ChaCha8Rng::seed_from_u64(4), 3, (3, 8, 8));

    let mut g = Graph::new();
    let xv = g.constant(&x);
    let out = model.forward(&mut g, xv).unwrap();
    let loss = g.sum_all(out.pooled);
    g.backward(loss).unwrap();
    assert_eq!(attention_grad_norm(&model, &g), 0.0);
    let backbone_grad = model.backbone.parameters().iter().filter_map(|p| g.param_grad(p.id())).count();
    assert!(backbone_grad > 0);

    let mut g = Graph::new();
    let xv = g.constant(&x);
    let out = model.forward(&mut g, xv).unwrap();
    let loss = g.sum_all(out.va);
    g.backward(loss).unwrap();
    assert!(attention_grad_norm(&model, &g) > 0.0);
}

// ---- freezing ---------------------------------------------------------------

fn frame_batch(rng: &mut ChaCha8Rng, lengths: &[usize], dims: (usize, usize, usize)) -> Batch {
    let (c, h, w) = dims;
    let b = lengths.len();
    let t = *lengths.iter().max().unwrap();
    let mut data = vec![0.0; b * t * c * h * w];
    for (i, &len) in lengths.iter().enumerate() {
        for v in &mut data[i * t * c * h * w..][..len * c * h * w] {
            *v = rng.random_range(0.0..1.0);
        }
    }
    Batch {
        indices: (0..b).collect(),
        video_ids: (0..b).map(|i| format!("v{i}")).collect(),
        lengths: lengths.to_vec(),
        inputs: Tensor::from_vec([b, t, c, h, w], data).unwrap(),
        labels: Tensor::from_vec(
            [b, NUM_CATEGORIES],
            (0..b * NUM_CATEGORIES).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap(),
    }
}

#[test]
fn frozen_extractor_survives_ten_training_steps() {
    let mut extractor = MtlDanModel::new(&small(), 5).unwrap();
    extractor.set_frozen(true);
    let mut head = EriHead::new(&EriHeadConfig { hidden: 8, layers: 1 }, 6).unwrap();
    let before = extractor.parameter_bytes();
    let head_before = parameter_digest(&head);
    let mut trainer = EriTrainer::new(LossKind::Pcc, 1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let batch = frame_batch(&mut rng, &[3, 1, 2, 3], (3, 8, 8));
        trainer.step(&mut extractor, &mut head, &batch).unwrap();
    }
    assert_eq!(extractor.parameter_bytes(), before);
    assert_ne!(parameter_digest(&head), head_before);
}

#[test]
fn frozen_model_rejects_pretraining() {
    let mut model = MtlDanModel::new(&small(), 7).unwrap();
    model.set_frozen(true);
    let batch = separable_batch(&mut ChaCha8Rng::seed_from_u64(0), 4);
    let r = MtlPretrainer::new(1e-3).step(&mut model, &batch);
    assert!(matches!(r, Err(Error::FrozenModel)));
}

#[test]
fn unfrozen_step_changes_parameters() {
    let mut model = MtlDanModel::new(&small(), 8).unwrap();
    model.set_frozen(true);
    model.set_frozen(false);
    let before = model.parameter_bytes();
    let batch = separable_batch(&mut ChaCha8Rng::seed_from_u64(1), 8);
    let loss = MtlPretrainer::new(1e-3).step(&mut model, &batch).unwrap();
    assert!(loss.is_finite());
    assert_ne!(model.parameter_bytes(), before);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut model = MtlDanModel::new(&small(), 9).unwrap();
    let before = model.parameter_bytes();
    let batch = separable_batch(&mut ChaCha8Rng::seed_from_u64(2), 8);
    let mut pre = MtlPretrainer::new(0.0);
    for _ in 0..3 {
        assert!(pre.step(&mut model, &batch).unwrap().is_finite());
    }
    assert_eq!(model.parameter_bytes(), before);
}

#[test]
fn malformed_labels_are_rejected() {
    let mut model = MtlDanModel::new(&small(), 10).unwrap();
    let mut batch = separable_batch(&mut ChaCha8Rng::seed_from_u64(3), 4);
    batch.expr[0] = 8;
    let r = MtlPretrainer::new(1e-3).step(&mut model, &batch);
    assert!(matches!(r, Err(Error::LabelOutOfRange { .. })));

    let mut batch = separable_batch(&mut ChaCha8Rng::seed_from_u64(3), 4);
    batch.va[1][0] = 1.5;
    let r = MtlPretrainer::new(1e-3).step(&mut model, &batch);
    assert!(matches!(r, Err(Error::LabelOutOfRange { .. })));
}

// ---- pretraining ------------------------------------------------------------

/// Frames whose labels are linear probes of per-quadrant channel means, so
/// every task is a fixed function of simple input statistics.
fn separable_batch(rng: &mut ChaCha8Rng, n: usize) -> MtlBatch {
    let (c, h, w) = (3, 8, 8);
    let mut probe = ChaCha8Rng::seed_from_u64(0xfeed);
    let n_stats = c * 4;
    let expr_probe: Vec<Vec<f64>> = (0..EXPR_DIM)
        .map(|_| (0..n_stats).map(|_| probe.random_range(-1.0..1.0)).collect())
        .collect();
    let au_probe: Vec<Vec<f64>> = (0..AU_DIM)
        .map(|_| (0..n_stats).map(|_| probe.random_range(-1.0..1.0)).collect())
        .collect();

    let mut data = Vec::with_capacity(n * c * h * w);
    let (mut expr, mut au, mut va) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let levels: Vec<f64> = (0..n_stats).map(|_| rng.random_range(0.0..1.0)).collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let q = (y >= h / 2) as usize * 2 + (x >= w / 2) as usize;
                    data.push(levels[ch * 4 + q] + rng.random_range(-0.05..0.05));
                }
            }
        }
        let centered: Vec<f64> = levels.iter().map(|v| v - 0.5).collect();
        let dot = |p: &[f64]| p.iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>();
        let scores: Vec<f64> = expr_probe.iter().map(|p| dot(p)).collect();
        let best = (0..EXPR_DIM).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        expr.push(best);
        au.push(std::array::from_fn(|k| dot(&au_probe[k]) > 0.0));
        va.push([centered[0].clamp(-1.0, 1.0), centered[1].clamp(-1.0, 1.0)]);
    }
    MtlBatch {
        frames: Tensor::from_vec([n, c, h, w], data).unwrap(),
        expr,
        au,
        va,
    }
}

#[test]
fn loss_falls_over_twenty_steps() {
    let mut model = MtlDanModel::new(&small(), 11).unwrap();
    let batch = separable_batch(&mut ChaCha8Rng::seed_from_u64(4), 16);
    let mut pre = MtlPretrainer::new(1e-2);
    let first = pre.step(&mut model, &batch).unwrap();
    let mut last = first;
    for _ in 1..20 {
        last = pre.step(&mut model, &batch).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn pretraining_fits_separable_expression_labels() {
    let mut model = MtlDanModel::new(&small(), 12).unwrap();
    let batch = separable_batch(&mut ChaCha8Rng::seed_from_u64(5), 32);
    let mut pre = MtlPretrainer::new(1e-2);
    for _ in 0..200 {
        pre.step(&mut model, &batch).unwrap();
    }
    let acc = expr_accuracy(&model, &batch).unwrap();
    assert!(acc >= 0.9, "accuracy {acc}");
}
