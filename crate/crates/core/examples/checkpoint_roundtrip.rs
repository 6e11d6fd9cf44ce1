//! Saves a model pair, reloads it, and shows what a damaged file or a
//! mismatched architecture reports.

use eri_core::autodiff::Module;
use eri_core::checkpoint::{encode, from_bytes, load, load_into, save};
use eri_core::config::RunConfig;
use eri_core::train::build_models;
use eri_core::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("eri-checkpoint-example");
    let path = dir.join("model.ckpt");

    let cfg = RunConfig::default();
    let (extractor, head) = build_models(&cfg)?;
    save(&path, &cfg, &extractor, &head)?;
    let ck = load(&path)?;
    println!(
        "{} extractor + {} head parameters, frozen {}, identical {}",
        ck.extractor.parameter_count(),
        ck.head.parameter_count(),
        ck.extractor.is_frozen(),
        ck.extractor.parameter_bytes() == extractor.parameter_bytes()
            && ck.head.parameter_bytes() == head.parameter_bytes()
    );

    let mut bytes = encode(&cfg, &extractor, &head);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    println!("flipped byte: {}", from_bytes(&bytes).unwrap_err());

    let mut other = cfg.clone();
    other.stage_channels = [16, 32, 64, 128];
    let (mut ex2, mut head2) = build_models(&other)?;
    println!("wrong backbone: {}", load_into(&path, &mut ex2, &mut head2).unwrap_err());
    Ok(())
}
