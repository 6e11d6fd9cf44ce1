use super::init::{self, InitRng};
use crate::autodiff::{Graph, Module, Parameter, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut InitRng) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                init::xavier_uniform(rng, &[out_dim, in_dim], in_dim, out_dim),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros([out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    /// `x: [B×in]` → `[B×out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_dim() {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, layer expects [B×{}]", s, self.in_dim()),
            ));
        }
        let w = g.param(&self.weight);
        let wt = g.transpose(w)?;
        let xw = g.matmul(x, wt)?;
        let b = g.param(&self.bias);
        g.add(xw, b)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Convolution layer with He-normal weights and an optional zero-initialized bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                init::he_normal(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
            ),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros([out_channels, 1, 1]))),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-channel batch normalization over `[N×C×H×W]`.
///
/// Training mode normalizes with the batch's population statistics and
/// records momentum-updated running statistics on the graph (applied by
/// [`Module::absorb`]). Eval mode uses the running statistics only.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
    pub momentum: f64,
    pub eps: f64,
    pub training: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: Parameter::buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: Parameter::buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            momentum: 0.1,
            eps: 1e-5,
            training: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.tensor.numel()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let c = self.channels();
        if s.len() != 4 || s[1] != c {
            return Err(Error::shape(
                "batchnorm",
                format!("input {:?}, layer has {c} channels", s),
            ));
        }
        let (mean, var) = if self.training {
            let count = s[0] * s[2] * s[3];
            if count < 2 {
                return Err(Error::BatchTooSmall {
                    what: "batch-norm statistics (N·H·W)",
                    got: count,
                });
            }
            let mean = g.mean(x, &[0, 2, 3], true)?;
            let centered = g.sub(x, mean)?;
            let sq = g.square(centered);
            let var = g.mean(sq, &[0, 2, 3], true)?;
            let (bm, bv) = (g.value(mean).to_vec(), g.value(var).to_vec());
            self.record_running_stats(g, bm, bv);
            (mean, var)
        } else {
            let m = g.constant(&self.running_mean.tensor);
            let v = g.constant(&self.running_var.tensor);
            (g.reshape(m, [c, 1, 1])?, g.reshape(v, [c, 1, 1])?)
        };
        let centered = g.sub(x, mean)?;
        let shifted = g.add_scalar(var, self.eps);
        let std = g.sqrt(shifted);
        let normed = g.div(centered, std)?;
        let gamma = g.param(&self.gamma);
        let gamma = g.reshape(gamma, [c, 1, 1])?;
        let beta = g.param(&self.beta);
        let beta = g.reshape(beta, [c, 1, 1])?;
        let scaled = g.mul(normed, gamma)?;
        g.add(scaled, beta)
    }

    fn record_running_stats(&self, g: &mut Graph, batch_mean: Vec<f64>, batch_var: Vec<f64>) {
        let p = g.precision();
        let m = self.momentum;
        let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter()
                .zip(new)
                .map(|(o, n)| p.round((1.0 - m) * o + m * n))
                .collect()
        };
        let rm = blend(self.running_mean.tensor.data(), &batch_mean);
        let rv = blend(self.running_var.tensor.data(), &batch_var);
        g.record_buffer_update(self.running_mean.id(), rm);
        g.record_buffer_update(self.running_var.id(), rv);
    }
}

impl Module for BatchNorm2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
