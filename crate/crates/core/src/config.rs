//! Run configuration: a flat `key=value` document.
//!
//! Serialization is canonical (fixed key order, one key per line), so the
//! same settings always produce the same bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{parse_dims, LabelNorm};
use crate::eri_head::EriHeadConfig;
use crate::error::{Error, Result};
use crate::metrics::LossKind;
use crate::mtl_dan::{DescriptorMode, MtlDanConfig};
use crate::nn::BackboneConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// `(C, H, W)`
    pub input_size: (usize, usize, usize),
    pub attention_heads: usize,
    pub attention_reduction: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub loss: LossKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer step budget; 0 means run all epochs.
    pub steps: usize,
    pub seed: u64,
    pub freeze_extractor: bool,
    pub label_norm: LabelNorm,
    pub descriptor_mode: DescriptorMode,
    pub parallel_extract: bool,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let m = MtlDanConfig::default();
        let e = EriHeadConfig::default();
        RunConfig {
            stage_channels: b.stage_channels,
            blocks_per_stage: b.blocks_per_stage,
            input_size: b.input_size,
            attention_heads: m.attention_heads,
            attention_reduction: m.attention_reduction,
            lstm_hidden: e.hidden,
            lstm_layers: e.layers,
            loss: LossKind::Pcc,
            lr: 1e-3,
            batch_size: 16,
            epochs: 200,
            steps: 0,
            seed: 0,
            freeze_extractor: true,
            label_norm: LabelNorm::default(),
            descriptor_mode: DescriptorMode::default(),
            parallel_extract: false,
            manifest: PathBuf::from("data/manifest.csv"),
            checkpoint: PathBuf::from("run/model.ckpt"),
            report: PathBuf::from("run/report.csv"),
        }
    }
}

pub const KEYS: [&str; 21] = [
    "stage_channels",
    "blocks_per_stage",
    "input_size",
    "attention_heads",
    "attention_reduction",
    "lstm_hidden",
    "lstm_layers",
    "loss",
    "lr",
    "batch_size",
    "epochs",
    "steps",
    "seed",
    "freeze_extractor",
    "label_norm",
    "descriptor_mode",
    "parallel_extract",
    "manifest",
    "checkpoint",
    "report",
    "version",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::ConfigInvalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_quad(key: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::ConfigInvalid(format!("`{key}` needs four comma-separated values, got `{value}`")))
}

fn quad(v: &[usize; 4]) -> String {
    v.map(|x| x.to_string()).join(",")
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "stage_channels" => self.stage_channels = parse_quad(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_quad(key, v)?,
            "input_size" => self.input_size = parse_dims(v)?,
            "attention_heads" => self.attention_heads = parse(key, v)?,
            "attention_reduction" => self.attention_reduction = parse(key, v)?,
            "lstm_hidden" => self.lstm_hidden = parse(key, v)?,
            "lstm_layers" => self.lstm_layers = parse(key, v)?,
            "loss" => self.loss = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "freeze_extractor" => self.freeze_extractor = parse(key, v)?,
            "label_norm" => self.label_norm = v.parse()?,
            "descriptor_mode" => self.descriptor_mode = v.parse()?,
            "parallel_extract" => self.parallel_extract = parse(key, v)?,
            "manifest" => self.manifest = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "report" => self.report = PathBuf::from(v),
            "version" => {
                if v != CONFIG_VERSION {
                    return Err(Error::ConfigInvalid(format!("unsupported config version `{v}`")));
                }
            }
            other => return Err(Error::ConfigInvalid(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a `key=value` document over the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigInvalid(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if self.batch_size < 2 {
            return Err(Error::ConfigInvalid(format!(
                "batch_size must be at least 2 for correlation losses, got {}",
                self.batch_size
            )));
        }
        if self.attention_heads == 0 || self.attention_reduction == 0 {
            return Err(Error::ConfigInvalid("attention heads and reduction must be positive".into()));
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::ConfigInvalid("lstm hidden size and layer count must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::ConfigInvalid(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.epochs == 0 && self.steps == 0 {
            return Err(Error::ConfigInvalid("need a positive epoch count or step budget".into()));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.stage_channels,
            blocks_per_stage: self.blocks_per_stage,
            input_size: self.input_size,
        }
    }

    pub fn extractor(&self) -> MtlDanConfig {
        MtlDanConfig {
            backbone: self.backbone(),
            attention_heads: self.attention_heads,
            attention_reduction: self.attention_reduction,
        }
    }

    pub fn head(&self) -> EriHeadConfig {
        EriHeadConfig {
            hidden: self.lstm_hidden,
            layers: self.lstm_layers,
        }
    }

    /// Value of `key` in canonical textual form.
    pub fn get(&self, key: &str) -> Option<String> {
        let (c, h, w) = self.input_size;
        Some(match key {
            "stage_channels" => quad(&self.stage_channels),
            "blocks_per_stage" => quad(&self.blocks_per_stage),
            "input_size" => format!("{c}x{h}x{w}"),
            "attention_heads" => self.attention_heads.to_string(),
            "attention_reduction" => self.attention_reduction.to_string(),
            "lstm_hidden" => self.lstm_hidden.to_string(),
            "lstm_layers" => self.lstm_layers.to_string(),
            "loss" => self.loss.to_string(),
            "lr" => format!("{:?}", self.lr),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "freeze_extractor" => self.freeze_extractor.to_string(),
            "label_norm" => self.label_norm.to_string(),
            "descriptor_mode" => self.descriptor_mode.to_string(),
            "parallel_extract" => self.parallel_extract.to_string(),
            "manifest" => self.manifest.display().to_string(),
            "checkpoint" => self.checkpoint.display().to_string(),
            "report" => self.report.display().to_string(),
            "version" => CONFIG_VERSION.to_string(),
            _ => return None,
        })
    }
}

const CONFIG_VERSION: &str = "1";

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key}={}", self.get(key).expect("known key"))?;
        }
        Ok(())
    }
}
