//! End to end: synthesize videos, train the head on frozen descriptors,
//! reload the best checkpoint and score the validation split.

use eri_core::config::RunConfig;
use eri_core::data::{generate_synthetic, Split, SynthConfig};
use eri_core::train::{run_eval, run_training, Predictor};
use eri_core::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("eri-training-example");
    let summary = generate_synthetic(
        &SynthConfig {
            n_videos: 64,
            seed: 7,
            ..SynthConfig::default()
        },
        &dir.join("data"),
    )?;

    let cfg = RunConfig {
        manifest: summary.manifest_path.clone(),
        checkpoint: dir.join("run/model.ckpt"),
        report: dir.join("run/report.csv"),
        seed: 7,
        epochs: 0,
        steps: 300,
        ..RunConfig::default()
    };
    let outcome = run_training(&cfg)?;
    for r in outcome.history.iter().step_by(15) {
        println!(
            "epoch {:>3}  step {:>3}  loss {:.4}  train {:.3}  val {}",
            r.epoch,
            r.step,
            r.train_loss,
            r.train_mean_pcc,
            r.val_mean_pcc.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    println!("best epoch {}", outcome.best_epoch);

    let eval = run_eval(&Predictor::Checkpoint(cfg.checkpoint.clone()), &cfg.manifest, Split::Val, false)?;
    print!("val: {}", eval.report);
    Ok(())
}
