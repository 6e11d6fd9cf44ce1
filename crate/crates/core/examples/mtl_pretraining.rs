//! Pretrains a small extractor on frames whose expression, action-unit and
//! valence/arousal labels are simple functions of the pixel statistics.

use eri_core::autodiff::Tensor;
use eri_core::mtl_dan::{expr_accuracy, MtlBatch, MtlDanConfig, MtlDanModel, MtlPretrainer, AU_DIM, EXPR_DIM};
use eri_core::nn::BackboneConfig;
use eri_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: (usize, usize, usize) = (3, 8, 8);

fn labelled(rng: &mut ChaCha8Rng, n: usize) -> Result<MtlBatch> {
    let (c, h, w) = DIMS;
    let mut data = Vec::with_capacity(n * c * h * w);
    let (mut expr, mut au, mut va) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let level: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        for &l in &level {
            data.extend((0..h * w).map(|_| l + rng.random_range(-0.05..0.05)));
        }
        expr.push(((level[0] * EXPR_DIM as f64) as usize).min(EXPR_DIM - 1));
        au.push(std::array::from_fn(|k| level[k % 3] > (k as f64 + 0.5) / AU_DIM as f64));
        va.push([2.0 * level[1] - 1.0, 2.0 * level[2] - 1.0]);
    }
    Ok(MtlBatch {
        frames: Tensor::from_vec([n, c, h, w], data)?,
        expr,
        au,
        va,
    })
}

fn main() -> Result<()> {
    let cfg = MtlDanConfig {
        backbone: BackboneConfig {
            stage_channels: [8, 8, 16, 16],
            blocks_per_stage: [1, 1, 1, 1],
            input_size: DIMS,
        },
        attention_heads: 2,
        attention_reduction: 2,
    };
    let mut model = MtlDanModel::new(&cfg, 0)?;
    model.set_training(true);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = labelled(&mut rng, 64)?;
    let held_out = labelled(&mut rng, 64)?;
    let mut trainer = MtlPretrainer::new(3e-3);
    for step in 1..=300 {
        let loss = trainer.step(&mut model, &train)?;
        if step % 50 == 0 {
            model.set_training(false);
            println!(
                "step {step:>3}  loss {loss:.4}  expr acc train {:.2}  held out {:.2}",
                expr_accuracy(&model, &train)?,
                expr_accuracy(&model, &held_out)?
            );
            model.set_training(true);
        }
    }
    model.set_training(false);
    model.set_frozen(true);
    println!("frozen: {}", model.is_frozen());
    Ok(())
}
