//! Multi-head cross-attention over a backbone feature map.
//!
//! Each head gates the feature map twice: a spatial map `[N×1×h×w]` from a
//! small conv path, and channel gates `[N×C]` from a squeeze-excitation style
//! MLP on the pooled features. The gated map is average-pooled into one
//! C-vector per sample; heads are summed.

use crate::autodiff::{Graph, Module, Parameter, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, InitRng, Linear};

#[derive(Clone, Debug)]
pub struct CrossAttentionHead {
    /// 1×1 conv, C → C/r.
    pub spatial_reduce: Conv2d,
    /// 3×3 conv (padding 1), C/r → 1.
    pub spatial_map: Conv2d,
    /// C → C/r.
    pub channel_squeeze: Linear,
    /// C/r → C.
    pub channel_excite: Linear,
    channels: usize,
    reduction: usize,
}

/// Intermediate values of one head, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub spatial_map: Var,
    pub channel_gates: Var,
    pub output: Var,
}

impl CrossAttentionHead {
    pub fn new(name: &str, channels: usize, reduction: usize, rng: &mut InitRng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::ConfigInvalid(format!(
                "attention reduction {reduction} must divide channel count {channels}"
            )));
        }
        let inner = channels / reduction;
        Ok(CrossAttentionHead {
            spatial_reduce: Conv2d::new(&format!("{name}.spatial_reduce"), channels, inner, 1, 1, 0, true, rng),
            spatial_map: Conv2d::new(&format!("{name}.spatial_map"), inner, 1, 3, 1, 1, true, rng),
            channel_squeeze: Linear::new(&format!("{name}.channel_squeeze"), channels, inner, rng),
            channel_excite: Linear::new(&format!("{name}.channel_excite"), inner, channels, rng),
            channels,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    /// `fmap: [N×C×h×w]` → `[N×C]`.
    pub fn forward(&self, g: &mut Graph, fmap: Var) -> Result<Var> {
        Ok(self.forward_parts(g, fmap)?.output)
    }

    pub fn forward_parts(&self, g: &mut Graph, fmap: Var) -> Result<HeadOutputs> {
        let s = g.shape(fmap).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(
                "attention head",
                format!("feature map {:?}, head expects [N×{}×h×w]", s, self.channels),
            ));
        }
        let n = s[0];

        let sp = self.spatial_reduce.forward(g, fmap)?;
        let sp = g.relu(sp);
        let sp = self.spatial_map.forward(g, sp)?;
        let spatial_map = g.sigmoid(sp);

        let pooled = g.mean(fmap, &[2, 3], false)?;
        let ch = self.channel_squeeze.forward(g, pooled)?;
        let ch = g.relu(ch);
        let ch = self.channel_excite.forward(g, ch)?;
        let channel_gates = g.sigmoid(ch);

        let gated = g.mul(fmap, spatial_map)?;
        let gates4 = g.reshape(channel_gates, [n, self.channels, 1, 1])?;
        let gated = g.mul(gated, gates4)?;
        let output = g.mean(gated, &[2, 3], false)?;
        Ok(HeadOutputs {
            spatial_map,
            channel_gates,
            output,
        })
    }
}

impl Module for CrossAttentionHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.spatial_reduce.visit(f);
        self.spatial_map.visit(f);
        self.channel_squeeze.visit(f);
        self.channel_excite.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.spatial_reduce.visit_mut(f);
        self.spatial_map.visit_mut(f);
        self.channel_squeeze.visit_mut(f);
        self.channel_excite.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: Vec<CrossAttentionHead>,
}

impl AttentionBlock {
    pub fn new(name: &str, channels: usize, num_heads: usize, reduction: usize, rng: &mut InitRng) -> Result<Self> {
        if num_heads == 0 {
            return Err(Error::ConfigInvalid("attention block needs at least one head".into()));
        }
        let heads = (0..num_heads)
            .map(|h| CrossAttentionHead::new(&format!("{name}.head{h}"), channels, reduction, rng))
            .collect::<Result<_>>()?;
        Ok(AttentionBlock { heads })
    }

    pub fn from_heads(heads: Vec<CrossAttentionHead>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::ConfigInvalid("attention block needs at least one head".into()))?;
        if heads.iter().any(|h| h.channels != first.channels) {
            return Err(Error::ConfigInvalid("attention heads disagree on channel count".into()));
        }
        Ok(AttentionBlock { heads })
    }

    pub fn output_dim(&self) -> usize {
        self.heads[0].channels
    }

    /// Sum of head outputs, accumulated in head index order.
    pub fn forward(&self, g: &mut Graph, fmap: Var) -> Result<Var> {
        let mut acc = self.heads[0].forward(g, fmap)?;
        for head in &self.heads[1..] {
            let v = head.forward(g, fmap)?;
            acc = g.add(acc, v)?;
        }
        Ok(acc)
    }
}

impl Module for AttentionBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for h in &self.heads {
            h.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for h in &mut self.heads {
            h.visit_mut(f);
        }
    }
}
