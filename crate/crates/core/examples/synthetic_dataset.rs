//! Writes a small planted-signal dataset, then reads it back: frame
//! sampling, label normalization and correlation batches.

use eri_core::data::{
    generate_synthetic, make_batches, sample_frame_indices, LabelNorm, Manifest, Split, SynthConfig,
};
use eri_core::Result;

fn main() -> Result<()> {
    for n in [29, 300, 349] {
        let idx = sample_frame_indices(n)?;
        println!("{n:>3} source frames -> {} sampled {:?}", idx.len(), idx);
    }

    let dir = std::env::temp_dir().join("eri-synthetic-example");
    let cfg = SynthConfig {
        n_videos: 16,
        frame_dims: (3, 16, 16),
        seed: 1,
        ..SynthConfig::default()
    };
    let summary = generate_synthetic(&cfg, &dir)?;
    println!(
        "{} train / {} val videos, mean {:.1} sampled frames, manifest at {}",
        summary.n_train,
        summary.n_val,
        summary.mean_sampled_len,
        summary.manifest_path.display()
    );

    let manifest = Manifest::load(&summary.manifest_path)?;
    let norm = LabelNorm::default();
    let train = manifest.load_split(Split::Train, norm)?;
    for s in train.iter().take(3) {
        println!("{}  frames {:?}  label {:.3?}", s.video_id, s.frames.shape(), s.norm_label.values());
    }
    let row = &manifest.rows[0];
    println!("raw {:.1?} -> normalized {:.3?}", row.labels(), norm.normalize(&row.labels())?.values());

    let batches = make_batches(&train, 5, Some(0), true)?;
    let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
    println!("correlation batches of at most 5: {sizes:?}");
    println!("first batch input {:?}, lengths {:?}", batches[0].inputs.shape(), batches[0].lengths);
    Ok(())
}
