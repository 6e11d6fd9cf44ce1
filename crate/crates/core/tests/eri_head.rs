use eri_core::autodiff::{Module, Tensor};
use eri_core::data::Batch;
use eri_core::eri_head::{parameter_digest, EriHead, EriHeadConfig, EriTrainer, ReactionVector};
use eri_core::metrics::{LossKind, NUM_CATEGORIES};
use eri_core::mtl_dan::DESCRIPTOR_DIM;
use eri_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn descriptors(rng: &mut ChaCha8Rng, b: usize, t: usize) -> Tensor {
    let n = b * t * DESCRIPTOR_DIM;
    Tensor::from_vec([b, t, DESCRIPTOR_DIM], (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn head(seed: u64) -> EriHead {
    EriHead::new(&EriHeadConfig::default(), seed).unwrap()
}

fn descriptor_batch(rng: &mut ChaCha8Rng, lengths: &[usize]) -> Batch {
    let b = lengths.len();
    let t = *lengths.iter().max().unwrap();
    Batch {
        indices: (0..b).collect(),
        video_ids: (0..b).map(|i| format!("v{i}")).collect(),
        lengths: lengths.to_vec(),
        inputs: descriptors(rng, b, t),
        labels: Tensor::from_vec(
            [b, NUM_CATEGORIES],
            (0..b * NUM_CATEGORIES).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap(),
    }
}

#[test]
fn zeroed_output_layer_predicts_one_half() {
    let mut h = head(0);
    h.fc.weight.assign(&Tensor::zeros(h.fc.weight.tensor.shape().to_vec())).unwrap();
    h.fc.bias.assign(&Tensor::zeros([NUM_CATEGORIES])).unwrap();
    let x = descriptors(&mut ChaCha8Rng::seed_from_u64(0), 3, 4);
    for r in h.predict(&x, &[4, 2, 1]).unwrap() {
        assert!(r.values().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn padded_tail_does_not_reach_predictions() {
    let h = head(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = descriptors(&mut rng, 2, 5);
    let mut y = x.clone();
    // second sequence has length 2: scribble over steps 2..5
    let row = 5 * DESCRIPTOR_DIM;
    for v in &mut y.data_mut()[row + 2 * DESCRIPTOR_DIM..2 * row] {
        *v = rng.random_range(-50.0..50.0);
    }
    let a = h.predict(&x, &[5, 2]).unwrap();
    let b = h.predict(&y, &[5, 2]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn outputs_are_open_unit_interval_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let h = head(i);
        let b = rng.random_range(1..5);
        let t = rng.random_range(1..6);
        let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t)).collect();
        let out = h.predict(&descriptors(&mut rng, b, t), &lengths).unwrap();
        assert_eq!(out.len(), b);
        for r in out {
            assert!(r.values().iter().all(|&v| v > 0.0 && v < 1.0), "{r:?}");
        }
    }
}

#[test]
fn each_row_depends_only_on_its_own_sequence() {
    let h = head(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = descriptors(&mut rng, 3, 4);
    let lengths = [4, 3, 1];
    let all = h.predict(&x, &lengths).unwrap();
    let row = 4 * DESCRIPTOR_DIM;
    for (i, &len) in lengths.iter().enumerate() {
        let one = Tensor::from_vec([1, 4, DESCRIPTOR_DIM], x.data()[i * row..(i + 1) * row].to_vec()).unwrap();
        let single = h.predict(&one, &[len]).unwrap();
        for (a, b) in single[0].values().iter().zip(all[i].values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_learning_rate_keeps_head_and_reports_finite_loss() {
    let mut h = head(4);
    let before = parameter_digest(&h);
    let mut trainer = EriTrainer::new(LossKind::Ccc, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let batch = descriptor_batch(&mut rng, &[3, 2, 3, 1]);
        assert!(trainer.step_descriptors(&mut h, &batch).unwrap().is_finite());
    }
    assert_eq!(parameter_digest(&h), before);
}

#[test]
fn training_steps_reduce_loss_on_a_fixed_batch() {
    let mut h = head(5);
    let batch = descriptor_batch(&mut ChaCha8Rng::seed_from_u64(5), &[3, 2, 3, 1, 2, 3]);
    let mut trainer = EriTrainer::new(LossKind::Pcc, 1e-2);
    let first = trainer.loss_on_descriptors(&h, &batch).unwrap();
    for _ in 0..30 {
        trainer.step_descriptors(&mut h, &batch).unwrap();
    }
    let last = trainer.loss_on_descriptors(&h, &batch).unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn single_sequence_batches_are_rejected() {
    let mut h = head(6);
    let batch = descriptor_batch(&mut ChaCha8Rng::seed_from_u64(6), &[2]);
    let r = EriTrainer::new(LossKind::Pcc, 1e-3).step_descriptors(&mut h, &batch);
    assert!(matches!(r, Err(Error::BatchTooSmall { .. })));
}

#[test]
fn length_outside_sequence_is_rejected() {
    let h = head(7);
    let x = descriptors(&mut ChaCha8Rng::seed_from_u64(7), 2, 3);
    assert!(matches!(h.predict(&x, &[3, 4]), Err(Error::LengthOutOfRange { .. })));
    assert!(matches!(h.predict(&x, &[0, 1]), Err(Error::LengthOutOfRange { .. })));
}

#[test]
fn head_parameter_names_are_stable() {
    let names = head(8).parameter_names();
    assert_eq!(names.first().map(String::as_str), Some("eri.lstm.layer0.w_i"));
    assert_eq!(names.last().map(String::as_str), Some("eri.fc.bias"));
}

#[test]
fn reaction_vector_bounds() {
    assert!(ReactionVector::new([0.0, 0.5, 1.0, 0.2, 0.3, 0.4, 0.9]).is_ok());
    assert!(matches!(
        ReactionVector::new([0.0, 0.5, 1.1, 0.2, 0.3, 0.4, 0.9]),
        Err(Error::LabelOutOfRange { .. })
    ));
    let r = ReactionVector::new([0.1; 7]).unwrap();
    assert_eq!(r.named().next(), Some(("Adoration", 0.1)));
}
