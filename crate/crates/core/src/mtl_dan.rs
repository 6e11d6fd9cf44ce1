//! Multi-task attention extractor: a shared backbone feeding expression
//! (8-way), action-unit (12) and valence/arousal (2) heads.
//!
//! Routing:
//!
//! ```text
//! f   = backbone(frames)                      [N×C×h×w]
//! a_e = attn_expr(f),  a_a = attn_au(f)       [N×C]
//! g   = GAP(f)                                [N×C]   (VA bypasses attention)
//! s   = [a_e ‖ a_a]                           [N×2C]  shared feature
//! expr ← head_expr([s ‖ a_e]),  au ← head_au([s ‖ a_a]),  va ← head_va([s ‖ g])
//! ```

use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionBlock;
use crate::autodiff::{Graph, Module, Parameter, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{correlation_loss, LossKind};
use crate::nn::{init_rng, Backbone, BackboneConfig, Linear};
use crate::optim::Adam;

pub const EXPR_DIM: usize = 8;
pub const AU_DIM: usize = 12;
pub const VA_DIM: usize = 2;
pub const DESCRIPTOR_DIM: usize = EXPR_DIM + AU_DIM + VA_DIM;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MtlDanConfig {
    pub backbone: BackboneConfig,
    pub attention_heads: usize,
    pub attention_reduction: usize,
}

impl Default for MtlDanConfig {
    fn default() -> Self {
        MtlDanConfig {
            backbone: BackboneConfig::default(),
            attention_heads: 4,
            attention_reduction: 4,
        }
    }
}

/// Whether descriptors carry activated head outputs (softmax / sigmoid /
/// tanh) or raw logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DescriptorMode {
    #[default]
    Activated,
    Logits,
}

impl fmt::Display for DescriptorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DescriptorMode::Activated => "activated",
            DescriptorMode::Logits => "logits",
        })
    }
}

impl FromStr for DescriptorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activated" => Ok(DescriptorMode::Activated),
            "logits" => Ok(DescriptorMode::Logits),
            other => Err(Error::ConfigInvalid(format!(
                "unknown descriptor mode `{other}` (activated|logits)"
            ))),
        }
    }
}

/// Per-frame head outputs, in the fixed order expression, AU, VA.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionDescriptor {
    pub v_expr: [f64; EXPR_DIM],
    pub v_au: [f64; AU_DIM],
    pub v_va: [f64; VA_DIM],
}

impl EmotionDescriptor {
    pub fn from_concat(row: &[f64]) -> Result<Self> {
        if row.len() != DESCRIPTOR_DIM {
            return Err(Error::shape(
                "descriptor",
                format!("expected {DESCRIPTOR_DIM} values, got {}", row.len()),
            ));
        }
        let mut d = EmotionDescriptor {
            v_expr: [0.0; EXPR_DIM],
            v_au: [0.0; AU_DIM],
            v_va: [0.0; VA_DIM],
        };
        d.v_expr.copy_from_slice(&row[..EXPR_DIM]);
        d.v_au.copy_from_slice(&row[EXPR_DIM..EXPR_DIM + AU_DIM]);
        d.v_va.copy_from_slice(&row[EXPR_DIM + AU_DIM..]);
        Ok(d)
    }

    /// `[v_expr ‖ v_au ‖ v_va]`
    pub fn concat(&self) -> [f64; DESCRIPTOR_DIM] {
        let mut out = [0.0; DESCRIPTOR_DIM];
        out[..EXPR_DIM].copy_from_slice(&self.v_expr);
        out[EXPR_DIM..EXPR_DIM + AU_DIM].copy_from_slice(&self.v_au);
        out[EXPR_DIM + AU_DIM..].copy_from_slice(&self.v_va);
        out
    }
}

/// Graph nodes produced by one extractor forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MtlDanOutputs {
    pub features: Var,
    pub pooled: Var,
    pub attn_expr: Var,
    pub attn_au: Var,
    pub shared: Var,
    pub logits_expr: Var,
    pub logits_au: Var,
    pub logits_va: Var,
    pub expr: Var,
    pub au: Var,
    pub va: Var,
}

#[derive(Clone, Debug)]
pub struct MtlDanModel {
    config: MtlDanConfig,
    pub backbone: Backbone,
    pub attn_expr: AttentionBlock,
    pub attn_au: AttentionBlock,
    pub head_expr: Linear,
    pub head_au: Linear,
    pub head_va: Linear,
    frozen: bool,
    training: bool,
}

impl MtlDanModel {
    /// Randomly initialized, unfrozen, in eval mode.
    pub fn new(config: &MtlDanConfig, seed: u64) -> Result<Self> {
        let mut rng = init_rng(seed);
        let backbone = Backbone::new("mtl_dan.backbone", &config.backbone, &mut rng)?;
        let c = config.backbone.feature_dim();
        let (h, r) = (config.attention_heads, config.attention_reduction);
        let attn_expr = AttentionBlock::new("mtl_dan.attn_expr", c, h, r, &mut rng)?;
        let attn_au = AttentionBlock::new("mtl_dan.attn_au", c, h, r, &mut rng)?;
        Ok(MtlDanModel {
            config: config.clone(),
            backbone,
            attn_expr,
            attn_au,
            head_expr: Linear::new("mtl_dan.head_expr", 3 * c, EXPR_DIM, &mut rng),
            head_au: Linear::new("mtl_dan.head_au", 3 * c, AU_DIM, &mut rng),
            head_va: Linear::new("mtl_dan.head_va", 3 * c, VA_DIM, &mut rng),
            frozen: false,
            training: false,
        })
    }

    pub fn config(&self) -> &MtlDanConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing excludes every parameter from gradient computation and
    /// optimizer updates, and pins batch-norm to its running statistics.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.set_all_frozen(frozen);
        self.apply_mode();
    }

    /// Training mode makes batch-norm use batch statistics. Ignored while
    /// frozen.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
        self.apply_mode();
    }

    pub fn is_training(&self) -> bool {
        self.training && !self.frozen
    }

    fn apply_mode(&mut self) {
        let t = self.is_training();
        self.backbone.set_training(t);
    }

    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<MtlDanOutputs> {
        let features = self.backbone.forward(g, frames)?;
        let attn_expr = self.attn_expr.forward(g, features)?;
        let attn_au = self.attn_au.forward(g, features)?;
        let pooled = g.mean(features, &[2, 3], false)?;
        let shared = g.concat(&[attn_expr, attn_au], 1)?;

        let expr_in = g.concat(&[shared, attn_expr], 1)?;
        let au_in = g.concat(&[shared, attn_au], 1)?;
        let va_in = g.concat(&[shared, pooled], 1)?;
        let logits_expr = self.head_expr.forward(g, expr_in)?;
        let logits_au = self.head_au.forward(g, au_in)?;
        let logits_va = self.head_va.forward(g, va_in)?;
        let expr = g.softmax(logits_expr)?;
        let au = g.sigmoid(logits_au);
        let va = g.tanh(logits_va);
        Ok(MtlDanOutputs {
            features,
            pooled,
            attn_expr,
            attn_au,
            shared,
            logits_expr,
            logits_au,
            logits_va,
            expr,
            au,
            va,
        })
    }

    /// `[N×22]` descriptor node.
    pub fn descriptor(&self, g: &mut Graph, out: &MtlDanOutputs, mode: DescriptorMode) -> Result<Var> {
        match mode {
            DescriptorMode::Activated => g.concat(&[out.expr, out.au, out.va], 1),
            DescriptorMode::Logits => g.concat(&[out.logits_expr, out.logits_au, out.logits_va], 1),
        }
    }

    /// Descriptor rows for a stack of frames, without recording gradients.
    /// Runs in eval mode regardless of the training flag.
    pub fn extract(&self, frames: &Tensor, mode: DescriptorMode) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(frames);
        let out = if self.is_training() {
            let mut eval = self.clone();
            eval.set_training(false);
            eval.forward(&mut g, x)?
        } else {
            self.forward(&mut g, x)?
        };
        let d = self.descriptor(&mut g, &out, mode)?;
        Ok(g.tensor(d))
    }

    pub fn extract_descriptors(&self, frames: &Tensor, mode: DescriptorMode) -> Result<Vec<EmotionDescriptor>> {
        let t = self.extract(frames, mode)?;
        t.data()
            .chunks(DESCRIPTOR_DIM)
            .map(EmotionDescriptor::from_concat)
            .collect()
    }
}

impl Module for MtlDanModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.backbone.visit(f);
        self.attn_expr.visit(f);
        self.attn_au.visit(f);
        self.head_expr.visit(f);
        self.head_au.visit(f);
        self.head_va.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.backbone.visit_mut(f);
        self.attn_expr.visit_mut(f);
        self.attn_au.visit_mut(f);
        self.head_expr.visit_mut(f);
        self.head_au.visit_mut(f);
        self.head_va.visit_mut(f);
    }
}

/// Labelled frames for multi-task pretraining.
#[derive(Clone, Debug)]
pub struct MtlBatch {
    /// `[N×C×H×W]`
    pub frames: Tensor,
    /// Expression class in `0..8` per frame.
    pub expr: Vec<usize>,
    pub au: Vec<[bool; AU_DIM]>,
    /// Valence/arousal in `[−1, 1]`.
    pub va: Vec<[f64; VA_DIM]>,
}

impl MtlBatch {
    fn validate(&self) -> Result<usize> {
        let n = self.frames.shape().first().copied().unwrap_or(0);
        if self.expr.len() != n || self.au.len() != n || self.va.len() != n {
            return Err(Error::shape(
                "pretrain batch",
                format!(
                    "{n} frames but {} / {} / {} labels",
                    self.expr.len(),
                    self.au.len(),
                    self.va.len()
                ),
            ));
        }
        if let Some(&bad) = self.expr.iter().find(|&&c| c >= EXPR_DIM) {
            return Err(Error::LabelOutOfRange {
                value: bad as f64,
                range: "expression class 0..=7",
            });
        }
        if let Some(&bad) = self.va.iter().flatten().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::LabelOutOfRange {
                value: bad,
                range: "valence/arousal [-1, 1]",
            });
        }
        Ok(n)
    }
}

/// Joint loss `CE(expr) + BCE(au) + (1 − CCC(va))`; each term is a batch mean.
pub fn mtl_loss(g: &mut Graph, out: &MtlDanOutputs, batch: &MtlBatch) -> Result<Var> {
    let n = batch.validate()?;

    let mut onehot = vec![0.0; n * EXPR_DIM];
    for (i, &c) in batch.expr.iter().enumerate() {
        onehot[i * EXPR_DIM + c] = 1.0;
    }
    let onehot = g.constant_from([n, EXPR_DIM], onehot)?;
    let logp = g.log_softmax(out.logits_expr)?;
    let picked = g.mul(logp, onehot)?;
    let picked = g.sum_all(picked);
    let ce = g.scale(picked, -1.0 / n as f64);

    // BCE with logits: softplus(z) − y·z
    let bits: Vec<f64> = batch
        .au
        .iter()
        .flat_map(|row| row.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    let y = g.constant_from([n, AU_DIM], bits)?;
    let sp = g.softplus(out.logits_au);
    let yz = g.mul(out.logits_au, y)?;
    let bce = g.sub(sp, yz)?;
    let bce = g.mean_all(bce);

    let va_t: Vec<f64> = batch.va.iter().flatten().copied().collect();
    let va_t = g.constant_from([n, VA_DIM], va_t)?;
    let va_loss = correlation_loss(g, LossKind::Ccc, out.va, va_t)?;

    let total = g.add(ce, bce)?;
    g.add(total, va_loss)
}

/// Multi-task pretraining loop state.
#[derive(Clone, Debug)]
pub struct MtlPretrainer {
    pub optimizer: Adam,
}

impl MtlPretrainer {
    pub fn new(lr: f64) -> Self {
        MtlPretrainer {
            optimizer: Adam::with_lr(lr),
        }
    }

    /// One optimizer step on the joint loss. Returns the loss before the step.
    pub fn step(&mut self, model: &mut MtlDanModel, batch: &MtlBatch) -> Result<f64> {
        if model.is_frozen() {
            return Err(Error::FrozenModel);
        }
        batch.validate()?;
        let mut g = Graph::new();
        let frames = g.constant(&batch.frames);
        let out = model.forward(&mut g, frames)?;
        let loss = mtl_loss(&mut g, &out, batch)?;
        g.backward(loss)?;
        model.zero_grad();
        model.absorb(&g);
        self.optimizer.step(model);
        Ok(g.item(loss))
    }
}

/// Fraction of frames whose arg-max expression matches the label.
pub fn expr_accuracy(model: &MtlDanModel, batch: &MtlBatch) -> Result<f64> {
    let desc = model.extract_descriptors(&batch.frames, DescriptorMode::Logits)?;
    let hits = desc
        .iter()
        .zip(&batch.expr)
        .filter(|(d, &label)| {
            let best = d
                .v_expr
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            best == label
        })
        .count();
    Ok(hits as f64 / batch.expr.len().max(1) as f64)
}
