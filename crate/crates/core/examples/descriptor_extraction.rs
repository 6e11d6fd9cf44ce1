//! Pushes a short clip through a randomly initialized, frozen extractor
//! and prints the 22-value descriptor of every frame.

use eri_core::autodiff::Tensor;
use eri_core::mtl_dan::{DescriptorMode, MtlDanConfig, MtlDanModel};
use eri_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let cfg = MtlDanConfig::default();
    let mut model = MtlDanModel::new(&cfg, 0)?;
    model.set_frozen(true);
    let (c, h, w) = cfg.backbone.input_size;
    let frames = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clip = Tensor::from_vec(
        [frames, c, h, w],
        (0..frames * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;

    for mode in [DescriptorMode::Activated, DescriptorMode::Logits] {
        println!("{mode:?}");
        for (t, d) in model.extract_descriptors(&clip, mode)?.iter().enumerate() {
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>().join(" ");
            println!("  frame {t}");
            println!("    expr {}", fmt(&d.v_expr));
            println!("    au   {}", fmt(&d.v_au));
            println!("    va   {}", fmt(&d.v_va));
        }
    }
    Ok(())
}
