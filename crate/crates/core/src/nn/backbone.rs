use super::init::InitRng;
use super::layers::{BatchNorm2d, Conv2d};
use crate::autodiff::{Graph, Module, Parameter, Var};
use crate::error::{Error, Result};

/// Stride of the first block in each of the four stages.
pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Shape of a ResNet-18-style feature extractor.
///
/// The default is a desk-scale miniature: 3×32×32 input, channels
/// `[16, 32, 64, 64]`, one block per stage. Full ResNet-18 would be channels
/// `[64, 128, 256, 512]` with two blocks per stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// `(C, H, W)` of one input frame.
    pub input_size: (usize, usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 64],
            blocks_per_stage: [1, 1, 1, 1],
            input_size: (3, 32, 32),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_size;
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) || c == 0 || h == 0 || w == 0 {
            return Err(Error::ConfigInvalid(format!(
                "backbone extents must all be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Channel count of the output feature map.
    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Spatial extent `(h, w)` of the output feature map.
    pub fn output_spatial(&self) -> (usize, usize) {
        let (_, mut h, mut w) = self.input_size;
        for s in STAGE_STRIDES {
            // 3×3, padding 1
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
        }
        (h, w)
    }
}

/// Two 3×3 conv+BN pairs with an identity or 1×1-projection skip path.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, stride: usize, rng: &mut InitRng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_channels, out_channels, 3, stride, 1, false, rng);
        let bn1 = BatchNorm2d::new(&format!("{name}.bn1"), out_channels);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, false, rng);
        let bn2 = BatchNorm2d::new(&format!("{name}.bn2"), out_channels);
        let projection = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(&format!("{name}.proj"), in_channels, out_channels, 1, stride, 0, false, rng),
                BatchNorm2d::new(&format!("{name}.proj_bn"), out_channels),
            )
        });
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }

    fn set_training(&mut self, training: bool) {
        self.bn1.training = training;
        self.bn2.training = training;
        if let Some((_, bn)) = &mut self.projection {
            bn.training = training;
        }
    }
}

impl Module for ResidualBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((conv, bn)) = &self.projection {
            conv.visit(f);
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((conv, bn)) = &mut self.projection {
            conv.visit_mut(f);
            bn.visit_mut(f);
        }
    }
}

/// Stem (3×3 conv + BN + relu) followed by four residual stages. Returns the
/// spatial feature map, unpooled.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn new(name: &str, config: &BackboneConfig, rng: &mut InitRng) -> Result<Self> {
        config.validate()?;
        let (in_c, _, _) = config.input_size;
        let c0 = config.stage_channels[0];
        let stem = Conv2d::new(&format!("{name}.stem"), in_c, c0, 3, 1, 1, false, rng);
        let stem_bn = BatchNorm2d::new(&format!("{name}.stem_bn"), c0);
        let mut blocks = Vec::new();
        let mut channels = c0;
        for (stage, &stage_stride) in STAGE_STRIDES.iter().enumerate() {
            let out = config.stage_channels[stage];
            for b in 0..config.blocks_per_stage[stage] {
                let stride = if b == 0 { stage_stride } else { 1 };
                blocks.push(ResidualBlock::new(
                    &format!("{name}.stage{}.block{}", stage + 1, b),
                    channels,
                    out,
                    stride,
                    rng,
                ));
                channels = out;
            }
        }
        Ok(Backbone {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `frames: [N×C×H×W]` → `[N×C_f×h×w]`.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let s = g.shape(frames);
        let (c, h, w) = self.config.input_size;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(
                "backbone",
                format!("frames {:?}, expected [N×{c}×{h}×{w}]", s),
            ));
        }
        let x = self.stem.forward(g, frames)?;
        let x = self.stem_bn.forward(g, x)?;
        let mut x = g.relu(x);
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn set_training(&mut self, training: bool) {
        self.stem_bn.training = training;
        for b in &mut self.blocks {
            b.set_training(training);
        }
    }
}

impl Module for Backbone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.stem.visit(f);
        self.stem_bn.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}
