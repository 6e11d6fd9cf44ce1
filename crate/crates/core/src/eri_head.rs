//! Temporal regression head: per-frame descriptors → LSTM → linear →
//! sigmoid → seven reaction intensities.

use std::ops::Index;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Module, Parameter, Precision, Tensor, Var, with_precision};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::metrics::{correlation_loss, LossKind, CATEGORY_NAMES, NUM_CATEGORIES};
use crate::mtl_dan::{DescriptorMode, MtlDanModel, DESCRIPTOR_DIM};
use crate::nn::{init_rng, Linear, Lstm};
use crate::optim::Adam;

/// Seven intensities in `[0, 1]`, in the fixed category order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReactionVector(pub [f64; NUM_CATEGORIES]);

impl ReactionVector {
    pub fn new(values: [f64; NUM_CATEGORIES]) -> Result<Self> {
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::LabelOutOfRange {
                value: bad,
                range: "[0, 1]",
            });
        }
        Ok(ReactionVector(values))
    }

    pub fn values(&self) -> &[f64; NUM_CATEGORIES] {
        &self.0
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        CATEGORY_NAMES.iter().copied().zip(self.0.iter().copied())
    }
}

impl Index<usize> for ReactionVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EriHeadConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for EriHeadConfig {
    fn default() -> Self {
        EriHeadConfig { hidden: 64, layers: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct EriHead {
    pub lstm: Lstm,
    pub fc: Linear,
}

impl EriHead {
    pub fn new(config: &EriHeadConfig, seed: u64) -> Result<Self> {
        let mut rng = init_rng(seed);
        let lstm = Lstm::new("eri.lstm", DESCRIPTOR_DIM, config.hidden, config.layers, &mut rng)?;
        let fc = Linear::new("eri.fc", config.hidden, NUM_CATEGORIES, &mut rng);
        Ok(EriHead { lstm, fc })
    }

    pub fn config(&self) -> EriHeadConfig {
        EriHeadConfig {
            hidden: self.lstm.hidden_dim(),
            layers: self.lstm.layers.len(),
        }
    }

    /// `descriptors: [B×T×22]` → `[B×7]`, strictly inside (0, 1).
    pub fn forward(&self, g: &mut Graph, descriptors: Var, lengths: &[usize]) -> Result<Var> {
        let s = g.shape(descriptors);
        if s.len() != 3 || s[2] != DESCRIPTOR_DIM {
            return Err(Error::shape(
                "eri head",
                format!("descriptors {:?}, expected [B×T×{DESCRIPTOR_DIM}]", s),
            ));
        }
        let h = self.lstm.forward(g, descriptors, lengths)?;
        let z = self.fc.forward(g, h)?;
        Ok(g.sigmoid(z))
    }

    /// Inference without gradient recording; one vector per sequence.
    pub fn predict(&self, descriptors: &Tensor, lengths: &[usize]) -> Result<Vec<ReactionVector>> {
        let mut g = Graph::no_grad();
        let x = g.constant(descriptors);
        let y = self.forward(&mut g, x, lengths)?;
        Ok(g.value(y)
            .chunks(NUM_CATEGORIES)
            .map(|row| ReactionVector(row.try_into().expect("seven columns")))
            .collect())
    }
}

impl Module for EriHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.lstm.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.lstm.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

/// SHA-256 over a module's parameter bytes.
pub fn parameter_digest(module: &dyn Module) -> [u8; 32] {
    Sha256::digest(module.parameter_bytes()).into()
}

/// Per-frame descriptors for one video, `frames: [T×C×H×W]` → `[T×22]`.
pub fn video_descriptors(extractor: &MtlDanModel, frames: &Tensor, mode: DescriptorMode) -> Result<Tensor> {
    extractor.extract(frames, mode)
}

/// Turns a frame batch `[B×T×C×H×W]` into a descriptor batch `[B×T×22]`,
/// running the frozen extractor on each sequence's valid frames. Padding
/// rows stay zero. With `parallel` the sequences are spread over the rayon
/// pool; results are merged in sample order.
pub fn extract_batch(extractor: &MtlDanModel, batch: &Batch, mode: DescriptorMode, parallel: bool) -> Result<Tensor> {
    let s = batch.inputs.shape();
    if s.len() != 5 {
        return Err(Error::shape(
            "extract batch",
            format!("expected frames [B×T×C×H×W], got {:?}", s),
        ));
    }
    let (b, t) = (s[0], s[1]);
    let frame_len: usize = s[2..].iter().product();
    let frame_shape = s[2..].to_vec();
    let one = |i: usize| -> Result<Vec<f64>> {
        let len = batch.lengths[i];
        let start = i * t * frame_len;
        let data = batch.inputs.data()[start..start + len * frame_len].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&frame_shape);
        let frames = Tensor::from_vec(shape, data)?;
        Ok(extractor.extract(&frames, mode)?.into_data())
    };
    let rows: Vec<Vec<f64>> = if parallel {
        let p = Precision::current();
        (0..b)
            .into_par_iter()
            .map(|i| with_precision(p, || one(i)))
            .collect::<Result<_>>()?
    } else {
        (0..b).map(one).collect::<Result<_>>()?
    };
    let mut out = vec![0.0; b * t * DESCRIPTOR_DIM];
    for (i, r) in rows.iter().enumerate() {
        let start = i * t * DESCRIPTOR_DIM;
        out[start..start + r.len()].copy_from_slice(r);
    }
    Tensor::from_vec([b, t, DESCRIPTOR_DIM], out)
}

/// Optimizer and loss selection for ERI training.
#[derive(Clone, Debug)]
pub struct EriTrainer {
    pub optimizer: Adam,
    pub loss: LossKind,
    pub descriptor_mode: DescriptorMode,
    /// Run frozen-extractor forwards across threads.
    pub parallel_extract: bool,
}

impl EriTrainer {
    pub fn new(loss: LossKind, lr: f64) -> Self {
        EriTrainer {
            optimizer: Adam::with_lr(lr),
            loss,
            descriptor_mode: DescriptorMode::default(),
            parallel_extract: false,
        }
    }

    /// Loss for a descriptor batch without updating anything.
    pub fn loss_on_descriptors(&self, head: &EriHead, batch: &Batch) -> Result<f64> {
        check_batch(batch)?;
        let mut g = Graph::no_grad();
        let loss = self.descriptor_loss(&mut g, head, batch)?;
        Ok(g.item(loss))
    }

    fn descriptor_loss(&self, g: &mut Graph, head: &EriHead, batch: &Batch) -> Result<Var> {
        let x = g.constant(&batch.inputs);
        let pred = head.forward(g, x, &batch.lengths)?;
        let target = g.constant(&batch.labels);
        correlation_loss(g, self.loss, pred, target)
    }

    /// One step on a batch whose inputs are already descriptors
    /// `[B×T×22]`. Returns the loss before the update.
    pub fn step_descriptors(&mut self, head: &mut EriHead, batch: &Batch) -> Result<f64> {
        check_batch(batch)?;
        let mut g = Graph::new();
        let loss = self.descriptor_loss(&mut g, head, batch)?;
        g.backward(loss)?;
        head.zero_grad();
        head.absorb(&g);
        self.optimizer.step(head);
        Ok(g.item(loss))
    }

    /// One step on a frame batch `[B×T×C×H×W]`.
    ///
    /// A frozen extractor runs without gradients and only the head is
    /// updated; in debug builds its parameter bytes are compared before and
    /// after. An unfrozen extractor is trained jointly with the head.
    pub fn step(&mut self, extractor: &mut MtlDanModel, head: &mut EriHead, batch: &Batch) -> Result<f64> {
        check_batch(batch)?;
        if extractor.is_frozen() {
            let before = cfg!(debug_assertions).then(|| parameter_digest(extractor));
            let descriptors = extract_batch(extractor, batch, self.descriptor_mode, self.parallel_extract)?;
            let desc_batch = batch.with_inputs(descriptors);
            let loss = self.step_descriptors(head, &desc_batch)?;
            if before.is_some_and(|d| d != parameter_digest(extractor)) {
                return Err(Error::FrozenViolation);
            }
            return Ok(loss);
        }
        self.joint_step(extractor, head, batch)
    }

    fn joint_step(&mut self, extractor: &mut MtlDanModel, head: &mut EriHead, batch: &Batch) -> Result<f64> {
        let s = batch.inputs.shape().to_vec();
        if s.len() != 5 {
            return Err(Error::shape(
                "eri train step",
                format!("expected frames [B×T×C×H×W], got {:?}", s),
            ));
        }
        let (b, t) = (s[0], s[1]);
        let frame_len: usize = s[2..].iter().product();
        let mut g = Graph::new();
        // gather valid frames into one [N×C×H×W] stack
        let mut data = Vec::new();
        for (i, &len) in batch.lengths.iter().enumerate() {
            let start = i * t * frame_len;
            data.extend_from_slice(&batch.inputs.data()[start..start + len * frame_len]);
        }
        let n: usize = batch.lengths.iter().sum();
        let mut shape = vec![n];
        shape.extend_from_slice(&s[2..]);
        let frames = g.constant_from(shape, data)?;
        let out = extractor.forward(&mut g, frames)?;
        let desc = extractor.descriptor(&mut g, &out, self.descriptor_mode)?;

        let mut rows = Vec::with_capacity(b);
        let mut offset = 0;
        for &len in &batch.lengths {
            let mut seq = g.slice(desc, 0, offset, len)?;
            if len < t {
                let pad = g.full([t - len, DESCRIPTOR_DIM], 0.0);
                seq = g.concat(&[seq, pad], 0)?;
            }
            rows.push(g.reshape(seq, [1, t, DESCRIPTOR_DIM])?);
            offset += len;
        }
        let x = g.concat(&rows, 0)?;
        let pred = head.forward(&mut g, x, &batch.lengths)?;
        let target = g.constant(&batch.labels);
        let loss = correlation_loss(&mut g, self.loss, pred, target)?;
        g.backward(loss)?;
        head.zero_grad();
        extractor.zero_grad();
        head.absorb(&g);
        extractor.absorb(&g);
        self.optimizer.step_all(&mut [head, extractor]);
        Ok(g.item(loss))
    }
}

fn check_batch(batch: &Batch) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall {
            what: "correlation-loss training",
            got: batch.len(),
        });
    }
    Ok(())
}
