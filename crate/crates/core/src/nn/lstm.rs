use super::init::{self, InitRng};
use crate::autodiff::{Graph, Module, Parameter, Tensor, Var};
use crate::error::{Error, Result};

const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Single LSTM layer.
///
/// Gate order is input, forget, cell candidate, output. Matrices are drawn
/// from `U(−1/√h, 1/√h)`; biases likewise except the forget gate, which
/// starts at 1.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    input_dim: usize,
    hidden_dim: usize,
    /// `W_{i,f,g,o}`, each `[hidden × input]`.
    pub w: [Parameter; 4],
    /// `U_{i,f,g,o}`, each `[hidden × hidden]`.
    pub u: [Parameter; 4],
    /// `b_{i,f,g,o}`, each `[hidden]`.
    pub b: [Parameter; 4],
}

impl LstmLayer {
    pub fn new(name: &str, input_dim: usize, hidden_dim: usize, rng: &mut InitRng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let w = GATES.map(|gate| {
            Parameter::new(
                format!("{name}.w_{gate}"),
                init::uniform(rng, &[hidden_dim, input_dim], bound),
            )
        });
        let u = GATES.map(|gate| {
            Parameter::new(
                format!("{name}.u_{gate}"),
                init::uniform(rng, &[hidden_dim, hidden_dim], bound),
            )
        });
        let b = GATES.map(|gate| {
            let t = if gate == "f" {
                Tensor::ones([hidden_dim])
            } else {
                init::uniform(rng, &[hidden_dim], bound)
            };
            Parameter::new(format!("{name}.b_{gate}"), t)
        });
        LstmLayer {
            input_dim,
            hidden_dim,
            w,
            u,
            b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Hidden state at step `lengths[b] − 1` for each sequence in
    /// `seq: [B×T×D]` → `[B×hidden]`.
    pub fn forward(&self, g: &mut Graph, seq: Var, lengths: &[usize]) -> Result<Var> {
        Ok(self.run(g, seq, lengths, false)?.0)
    }

    /// Every hidden state, `[B×T×hidden]`. Past a sequence's length the state
    /// is carried unchanged, so the last step equals the final valid state.
    pub fn forward_sequence(&self, g: &mut Graph, seq: Var, lengths: &[usize]) -> Result<Var> {
        let (_, all) = self.run(g, seq, lengths, true)?;
        Ok(all.expect("requested"))
    }

    fn run(&self, g: &mut Graph, seq: Var, lengths: &[usize], keep_all: bool) -> Result<(Var, Option<Var>)> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.input_dim {
            return Err(Error::shape(
                "lstm",
                format!("input {:?}, layer expects [B×T×{}]", s, self.input_dim),
            ));
        }
        let (batch, steps, dim) = (s[0], s[1], s[2]);
        if lengths.len() != batch {
            return Err(Error::shape(
                "lstm",
                format!("{} lengths for batch of {batch}", lengths.len()),
            ));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > steps) {
            return Err(Error::LengthOutOfRange {
                length: bad,
                max: steps,
            });
        }
        let h = self.hidden_dim;

        // Input projections for all steps at once: [B·T×D]·Wᵀ + b → [B×T×h].
        let flat = g.reshape(seq, [batch * steps, dim])?;
        let mut proj = Vec::with_capacity(4);
        let mut recur = Vec::with_capacity(4);
        for k in 0..4 {
            let w = g.param(&self.w[k]);
            let wt = g.transpose(w)?;
            let xw = g.matmul(flat, wt)?;
            let b = g.param(&self.b[k]);
            let xw = g.add(xw, b)?;
            proj.push(g.reshape(xw, [batch, steps, h])?);
            let u = g.param(&self.u[k]);
            recur.push(g.transpose(u)?);
        }

        let mut hidden = g.full([batch, h], 0.0);
        let mut cell = g.full([batch, h], 0.0);
        let mut outputs = Vec::with_capacity(if keep_all { steps } else { 0 });
        for t in 0..steps {
            let mask: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            let all_active = mask.iter().all(|&m| m == 1.0);
            let mut pre = [hidden; 4];
            for k in 0..4 {
                let xt = g.slice(proj[k], 1, t, 1)?;
                let xt = g.reshape(xt, [batch, h])?;
                let hu = g.matmul(hidden, recur[k])?;
                pre[k] = g.add(xt, hu)?;
            }
            let i = g.sigmoid(pre[0]);
            let f = g.sigmoid(pre[1]);
            let cand = g.tanh(pre[2]);
            let o = g.sigmoid(pre[3]);
            let fc = g.mul(f, cell)?;
            let ig = g.mul(i, cand)?;
            let c_new = g.add(fc, ig)?;
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc)?;
            if all_active {
                cell = c_new;
                hidden = h_new;
            } else {
                // carry state through padded steps: s ← m·s_new + (1−m)·s
                let keep: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
                let m = g.constant_from([batch, 1], mask)?;
                let km = g.constant_from([batch, 1], keep)?;
                cell = blend(g, c_new, cell, m, km)?;
                hidden = blend(g, h_new, hidden, m, km)?;
            }
            if keep_all {
                outputs.push(g.reshape(hidden, [batch, 1, h])?);
            }
        }
        let all = if keep_all {
            Some(g.concat(&outputs, 1)?)
        } else {
            None
        };
        Ok((hidden, all))
    }
}

fn blend(g: &mut Graph, new: Var, old: Var, mask: Var, keep: Var) -> Result<Var> {
    let a = g.mul(new, mask)?;
    let b = g.mul(old, keep)?;
    g.add(a, b)
}

impl Module for LstmLayer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for k in 0..4 {
            f(&self.w[k]);
            f(&self.u[k]);
            f(&self.b[k]);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for k in 0..4 {
            f(&mut self.w[k]);
            f(&mut self.u[k]);
            f(&mut self.b[k]);
        }
    }
}

/// Stacked LSTM layers; each layer after the first reads the full hidden
/// sequence of the one below.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new(name: &str, input_dim: usize, hidden_dim: usize, num_layers: usize, rng: &mut InitRng) -> Result<Self> {
        if num_layers == 0 || hidden_dim == 0 {
            return Err(Error::ConfigInvalid(
                "lstm needs at least one layer and a non-zero hidden size".into(),
            ));
        }
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input_dim } else { hidden_dim };
                LstmLayer::new(&format!("{name}.layer{l}"), d, hidden_dim, rng)
            })
            .collect();
        Ok(Lstm { layers })
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim()
    }

    pub fn forward(&self, g: &mut Graph, seq: Var, lengths: &[usize]) -> Result<Var> {
        let mut x = seq;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if l == last {
                return layer.forward(g, x, lengths);
            }
            x = layer.forward_sequence(g, x, lengths)?;
        }
        unreachable!("at least one layer")
    }
}

impl Module for Lstm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}
