use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use eri_core::config::RunConfig;
use eri_core::data::{generate_synthetic, parse_dims, Split, SynthConfig};
use eri_core::gradsuite::{model_suite, ops_suite, Table};
use eri_core::train::{run_eval, run_training, write_eval, Predictor};
use eri_core::{Error, Result};

#[derive(Parser)]
#[command(name = "eri", about = "Emotional reaction intensity estimation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signal synthetic dataset.
    Synth(SynthArgs),
    /// Train the regression head on a manifest.
    Train(RunArgs),
    /// Score a checkpoint or a predictions file on one split.
    Eval(EvalArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_videos: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// CxHxW
    #[arg(long, default_value = "3x32x32")]
    frame_dims: String,
    #[arg(long, default_value_t = 1.0)]
    signal_strength: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
}

/// Every run-config key as an optional override.
#[derive(Args)]
struct RunArgs {
    /// key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage_channels: Option<String>,
    #[arg(long)]
    blocks_per_stage: Option<String>,
    #[arg(long)]
    input_size: Option<String>,
    #[arg(long)]
    attention_heads: Option<String>,
    #[arg(long)]
    attention_reduction: Option<String>,
    #[arg(long)]
    lstm_hidden: Option<String>,
    #[arg(long)]
    lstm_layers: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    freeze_extractor: Option<String>,
    #[arg(long)]
    label_norm: Option<String>,
    #[arg(long)]
    descriptor_mode: Option<String>,
    #[arg(long)]
    parallel_extract: Option<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    report: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("stage_channels", &self.stage_channels),
            ("blocks_per_stage", &self.blocks_per_stage),
            ("input_size", &self.input_size),
            ("attention_heads", &self.attention_heads),
            ("attention_reduction", &self.attention_reduction),
            ("lstm_hidden", &self.lstm_hidden),
            ("lstm_layers", &self.lstm_layers),
            ("loss", &self.loss),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("steps", &self.steps),
            ("seed", &self.seed),
            ("freeze_extractor", &self.freeze_extractor),
            ("label_norm", &self.label_norm),
            ("descriptor_mode", &self.descriptor_mode),
            ("parallel_extract", &self.parallel_extract),
            ("manifest", &self.manifest),
            ("checkpoint", &self.checkpoint),
            ("report", &self.report),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// CSV with video_id and one column per category.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Where to write the report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallel_extract: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Model,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "ops")]
    scope: Scope,
    /// Coordinates probed per parameter tensor in model scope.
    #[arg(long, default_value_t = 2)]
    probes: usize,
    #[command(flatten)]
    run: RunArgs,
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_videos: a.n_videos,
        frame_dims: parse_dims(&a.frame_dims)?,
        seed: a.seed,
        signal_strength: a.signal_strength,
        val_fraction: a.val_fraction,
    };
    let s = generate_synthetic(&cfg, &a.out)?;
    println!(
        "wrote {} ({} train, {} val, mean {:.2} frames per video)",
        s.manifest_path.display(),
        s.n_train,
        s.n_val,
        s.mean_sampled_len
    );
    Ok(())
}

fn train(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let out = run_training(&cfg)?;
    let last = out.final_record();
    println!(
        "epochs {}  steps {}  train loss {:.4}  train mean PCC {:.4}  val mean PCC {}",
        last.epoch,
        last.step,
        last.train_loss,
        last.train_mean_pcc,
        last.val_mean_pcc.map_or("-".into(), |v| format!("{v:.4}"))
    );
    println!(
        "best epoch {} saved to {}; report at {}",
        out.best_epoch,
        cfg.checkpoint.display(),
        cfg.report.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let predictor = match (&a.checkpoint, &a.predictions) {
        (Some(c), _) => Predictor::Checkpoint(c.clone()),
        (None, Some(p)) => Predictor::PredictionFile(p.clone()),
        (None, None) => return Err(Error::ConfigInvalid("pass --checkpoint or --predictions".into())),
    };
    let split: Split = a.split.parse()?;
    let outcome = run_eval(&predictor, &a.manifest, split, a.parallel_extract)?;
    if let Some(path) = &a.out {
        write_eval(path, &outcome)?;
    }
    print!("{split}: {}", outcome.report);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let cfg = a.run.resolve()?;
    let rows = match a.scope {
        Scope::Ops => ops_suite(cfg.seed)?,
        Scope::Model => model_suite(&cfg, cfg.seed, a.probes)?,
    };
    print!("{}", Table(&rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {} failed", rows.len(), failed);
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
