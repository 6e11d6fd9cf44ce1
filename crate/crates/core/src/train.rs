//! End-to-end training and evaluation runs driven by a [`RunConfig`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{with_precision, Precision};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{make_batches, FeatureSequence, Manifest, SequenceSample, Split};
use crate::eri_head::{EriHead, EriTrainer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_mean_pcc, CorrelationReport, CATEGORIES, NUM_CATEGORIES};
use crate::mtl_dan::{DescriptorMode, MtlDanModel};

/// Seed offset separating the head's initialization stream from the
/// extractor's.
const HEAD_SEED_OFFSET: u64 = 0x9e37_79b9;

pub const REPORT_HEADER: &str = "epoch,step,train_loss,train_mean_pcc,val_mean_pcc";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub train_mean_pcc: f64,
    pub val_mean_pcc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were written to the checkpoint.
    pub best_epoch: usize,
    pub extractor: MtlDanModel,
    pub head: EriHead,
    pub manifest_sha256: String,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &EpochRecord {
        self.history.last().expect("at least one epoch")
    }
}

/// Freshly initialized models for `cfg`.
pub fn build_models(cfg: &RunConfig) -> Result<(MtlDanModel, EriHead)> {
    let mut extractor = MtlDanModel::new(&cfg.extractor(), cfg.seed)?;
    extractor.set_frozen(cfg.freeze_extractor);
    let head = EriHead::new(&cfg.head(), cfg.seed.wrapping_add(HEAD_SEED_OFFSET))?;
    Ok((extractor, head))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Descriptor sequences for every sample; the extractor runs without
/// gradients, one video at a time, optionally across threads.
pub fn describe(
    extractor: &MtlDanModel,
    samples: &[SequenceSample],
    mode: DescriptorMode,
    parallel: bool,
) -> Result<Vec<FeatureSequence>> {
    let one = |s: &SequenceSample| -> Result<FeatureSequence> {
        Ok(FeatureSequence {
            video_id: s.video_id.clone(),
            features: extractor.extract(&s.frames, mode)?,
            target: s.norm_label,
        })
    };
    if parallel {
        let p = Precision::current();
        samples.par_iter().map(|s| with_precision(p, || one(s))).collect()
    } else {
        samples.iter().map(one).collect()
    }
}

/// Head predictions for descriptor sequences, in input order.
pub fn predict(head: &EriHead, seqs: &[FeatureSequence], batch_size: usize) -> Result<Vec<[f64; NUM_CATEGORIES]>> {
    let mut out = Vec::with_capacity(seqs.len());
    for b in make_batches(seqs, batch_size.max(1), None, false)? {
        out.extend(head.predict(&b.inputs, &b.lengths)?.into_iter().map(|r| r.0));
    }
    Ok(out)
}

fn score(head: &EriHead, seqs: &[FeatureSequence], batch_size: usize) -> Result<CorrelationReport> {
    let preds = predict(head, seqs, batch_size)?;
    let targets: Vec<[f64; NUM_CATEGORIES]> = seqs.iter().map(|s| s.target.0).collect();
    evaluate_mean_pcc(&preds, &targets)
}

fn load_optional_split(manifest: &Manifest, split: Split, cfg: &RunConfig) -> Result<Vec<SequenceSample>> {
    match manifest.load_split(split, cfg.label_norm) {
        Err(Error::SplitEmpty(_)) => Ok(Vec::new()),
        other => other,
    }
}

/// Trains the head (and the extractor when it is not frozen) and writes the
/// report CSV and the checkpoint of the best epoch.
///
/// The best epoch is the one with the highest validation mean PCC, or the
/// highest training mean PCC when the manifest has no validation rows.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let manifest_sha256 = sha256_file(&cfg.manifest)?;
    let train = manifest.load_split(Split::Train, cfg.label_norm)?;
    let val = load_optional_split(&manifest, Split::Val, cfg)?;
    if train.len() < 2 {
        return Err(Error::BatchTooSmall {
            what: "training split",
            got: train.len(),
        });
    }
    if let Some(s) = train.first() {
        let (c, h, w) = cfg.input_size;
        if s.frames.shape()[1..] != [c, h, w] {
            return Err(Error::ConfigInvalid(format!(
                "frames are {:?} but input_size is {c}x{h}x{w}",
                &s.frames.shape()[1..]
            )));
        }
    }

    let (mut extractor, mut head) = build_models(cfg)?;
    let mut trainer = EriTrainer::new(cfg.loss, cfg.lr);
    trainer.descriptor_mode = cfg.descriptor_mode;
    trainer.parallel_extract = cfg.parallel_extract;

    let frozen = extractor.is_frozen();
    let mut train_desc = if frozen {
        describe(&extractor, &train, cfg.descriptor_mode, cfg.parallel_extract)?
    } else {
        Vec::new()
    };
    let mut val_desc = if frozen {
        describe(&extractor, &val, cfg.descriptor_mode, cfg.parallel_extract)?
    } else {
        Vec::new()
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut step = 0;
    let max_epochs = if cfg.epochs == 0 { usize::MAX } else { cfg.epochs };
    for epoch in 1..=max_epochs {
        let shuffle = Some(cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ epoch as u64);
        let mut losses = Vec::new();
        if frozen {
            for batch in make_batches(&train_desc, cfg.batch_size, shuffle, true)? {
                if cfg.steps > 0 && step >= cfg.steps {
                    break;
                }
                losses.push(trainer.step_descriptors(&mut head, &batch)?);
                step += 1;
            }
        } else {
            extractor.set_training(true);
            for batch in make_batches(&train, cfg.batch_size, shuffle, true)? {
                if cfg.steps > 0 && step >= cfg.steps {
                    break;
                }
                losses.push(trainer.step(&mut extractor, &mut head, &batch)?);
                step += 1;
            }
            extractor.set_training(false);
            train_desc = describe(&extractor, &train, cfg.descriptor_mode, cfg.parallel_extract)?;
            val_desc = describe(&extractor, &val, cfg.descriptor_mode, cfg.parallel_extract)?;
        }
        if losses.is_empty() {
            break;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let train_mean_pcc = score(&head, &train_desc, cfg.batch_size)?.mean_pcc;
        let val_mean_pcc = if val_desc.len() >= 2 {
            Some(score(&head, &val_desc, cfg.batch_size)?.mean_pcc)
        } else {
            None
        };
        let selector = val_mean_pcc.unwrap_or(train_mean_pcc);
        if best.is_none_or(|(b, _)| selector > b) {
            best = Some((selector, epoch));
            checkpoint::save(&cfg.checkpoint, cfg, &extractor, &head)?;
        }
        history.push(EpochRecord {
            epoch,
            step,
            train_loss,
            train_mean_pcc,
            val_mean_pcc,
        });
        if cfg.steps > 0 && step >= cfg.steps {
            break;
        }
    }
    let best_epoch = best.map(|(_, e)| e).ok_or_else(|| Error::ConfigInvalid("no training steps were run".into()))?;
    write_report(&cfg.report, cfg, &manifest_sha256, &history)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        extractor,
        head,
        manifest_sha256,
    })
}

fn comment_block(out: &mut String, cfg: &RunConfig, manifest_sha256: &str) {
    for line in cfg.to_string().lines() {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "# manifest_sha256={manifest_sha256}");
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Report CSV: `#` lines with the config and manifest hash, then one row
/// per epoch.
pub fn write_report(path: &Path, cfg: &RunConfig, manifest_sha256: &str, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    comment_block(&mut out, cfg, manifest_sha256);
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in history {
        let val = r.val_mean_pcc.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            r.epoch, r.step, r.train_loss, r.train_mean_pcc, val
        );
    }
    write_text(path, &out)
}

/// Header of the evaluation CSV.
pub fn eval_header() -> String {
    format!("split,n_samples,mean_pcc,{},degenerate_categories", CATEGORIES.join(","))
}

pub fn eval_row(split: Split, report: &CorrelationReport) -> String {
    let per: Vec<String> = report.per_category.iter().map(|v| format!("{v:.6}")).collect();
    let degenerate: Vec<&str> = report.degenerate_categories.iter().map(|&c| CATEGORIES[c]).collect();
    format!(
        "{split},{},{:.6},{},{}",
        report.n_samples,
        report.mean_pcc,
        per.join(","),
        degenerate.join(";")
    )
}

/// Source of predictions for an evaluation.
#[derive(Clone, Debug)]
pub enum Predictor {
    Checkpoint(PathBuf),
    /// CSV with a `video_id` column and one column per category.
    PredictionFile(PathBuf),
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: CorrelationReport,
    pub csv: String,
}

#[derive(Deserialize)]
struct PredictionRow {
    video_id: String,
    adoration: f64,
    amusement: f64,
    anxiety: f64,
    disgust: f64,
    empathic_pain: f64,
    fear: f64,
    surprise: f64,
}

fn read_predictions(path: &Path) -> Result<HashMap<String, [f64; NUM_CATEGORIES]>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = HashMap::new();
    for row in reader.deserialize() {
        let r: PredictionRow = row?;
        out.insert(
            r.video_id,
            [r.adoration, r.amusement, r.anxiety, r.disgust, r.empathic_pain, r.fear, r.surprise],
        );
    }
    Ok(out)
}

/// Scores `split` of a manifest. Targets are the manifest labels under the
/// predictor's label normalization.
pub fn run_eval(predictor: &Predictor, manifest_path: &Path, split: Split, parallel: bool) -> Result<EvalOutcome> {
    let manifest = Manifest::load(manifest_path)?;
    let rows: Vec<_> = manifest.split(split).collect();
    if rows.is_empty() {
        return Err(Error::SplitEmpty(split.to_string()));
    }
    let (preds, targets, cfg_text) = match predictor {
        Predictor::Checkpoint(path) => {
            let ck = checkpoint::load(path)?;
            let samples = manifest.load_split(split, ck.config.label_norm)?;
            let seqs = describe(&ck.extractor, &samples, ck.config.descriptor_mode, parallel)?;
            let preds = predict(&ck.head, &seqs, ck.config.batch_size)?;
            let targets = seqs.iter().map(|s| s.target.0).collect::<Vec<_>>();
            (preds, targets, Some(ck.config))
        }
        Predictor::PredictionFile(path) => {
            let table = read_predictions(path)?;
            let mut preds = Vec::with_capacity(rows.len());
            for r in &rows {
                let p = table.get(&r.video_id).ok_or_else(|| {
                    Error::format("predictions", format!("no row for video `{}`", r.video_id))
                })?;
                preds.push(*p);
            }
            (preds, rows.iter().map(|r| r.labels()).collect(), None)
        }
    };
    let report = evaluate_mean_pcc(&preds, &targets)?;
    let mut csv = String::new();
    if let Some(cfg) = cfg_text {
        comment_block(&mut csv, &cfg, &sha256_file(manifest_path)?);
    } else {
        let _ = writeln!(csv, "# manifest_sha256={}", sha256_file(manifest_path)?);
    }
    csv.push_str(&eval_header());
    csv.push('\n');
    csv.push_str(&eval_row(split, &report));
    csv.push('\n');
    Ok(EvalOutcome { report, csv })
}

/// Writes an evaluation CSV produced by [`run_eval`].
pub fn write_eval(path: &Path, outcome: &EvalOutcome) -> Result<()> {
    write_text(path, &outcome.csv)
}

