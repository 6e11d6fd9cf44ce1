//! Finite-difference verification tables for every primitive, the
//! composite layers, the correlation losses and the assembled model.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::CrossAttentionHead;
use crate::autodiff::{
    grad_check, param_grad_check, with_precision, Graph, Module, Parameter, Precision, Probes, Tensor, Var,
};
use crate::config::RunConfig;
use crate::eri_head::EriHead;
use crate::error::Result;
use crate::metrics::{correlation_loss, LossKind};
use crate::mtl_dan::MtlDanModel;
use crate::nn::{init_rng, BatchNorm2d, Conv2d, Linear, LstmLayer};
use crate::train::build_models;

/// Finite-difference step.
pub const EPS: f64 = 1e-5;
pub const OPS_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Smallest denominator in model-scope relative errors; probe gradients
/// below this are compared absolutely.
pub const MODEL_FLOOR: f64 = 1e-6;
const INSTANCES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Rows rendered as a fixed-width table.
pub struct Table<'a>(pub &'a [CheckRow]);

impl fmt::Display for Table<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.0.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:<width$}  {:>12}  {:>9}  result", "name", "max_rel_err", "tolerance")?;
        for r in self.0 {
            writeln!(
                f,
                "{:<width$}  {:>12.3e}  {:>9.0e}  {}",
                r.name,
                r.max_rel_err,
                r.tolerance,
                if r.passed() { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Entries with magnitude in `[0.05, 1)` and random sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("sized")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape, 0.5, 1.5)
}

/// `Σ y ⊙ w` for fixed random `w`.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = g.constant(&w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

type Make = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
type Op = fn(&mut Graph, &[Var]) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Make, Op)> {
    vec![
        ("add", |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, 1)
        }),
        ("sub", |r| vec![random(r, &[2, 3, 2], -1.0, 1.0), random(r, &[3, 1], -1.0, 1.0)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted(g, y, 2)
        }),
        ("mul", |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 1], -1.0, 1.0)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, 3)
        }),
        ("div", |r| vec![random(r, &[3, 4], -1.0, 1.0), off_zero(r, &[4])], |g, v| {
            let y = g.div(v[0], v[1])?;
            weighted(g, y, 4)
        }),
        ("matmul", |r| vec![random(r, &[3, 5], -1.0, 1.0), random(r, &[5, 2], -1.0, 1.0)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, 5)
        }),
        ("transpose", |r| vec![random(r, &[3, 5], -1.0, 1.0)], |g, v| {
            let y = g.transpose(v[0])?;
            weighted(g, y, 6)
        }),
        ("conv2d", |r| vec![random(r, &[2, 2, 5, 5], -1.0, 1.0), random(r, &[3, 2, 3, 3], -1.0, 1.0)], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            weighted(g, y, 7)
        }),
        ("relu", |r| vec![off_zero(r, &[3, 4])], |g, v| {
            let y = g.relu(v[0]);
            weighted(g, y, 8)
        }),
        ("sigmoid", |r| vec![random(r, &[3, 4], -3.0, 3.0)], |g, v| {
            let y = g.sigmoid(v[0]);
            weighted(g, y, 9)
        }),
        ("tanh", |r| vec![random(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.tanh(v[0]);
            weighted(g, y, 10)
        }),
        ("exp", |r| vec![random(r, &[5], -1.0, 1.0)], |g, v| {
            let y = g.exp(v[0]);
            weighted(g, y, 11)
        }),
        ("ln", |r| vec![positive(r, &[5])], |g, v| {
            let y = g.ln(v[0]);
            weighted(g, y, 12)
        }),
        ("sqrt", |r| vec![positive(r, &[5])], |g, v| {
            let y = g.sqrt(v[0]);
            weighted(g, y, 13)
        }),
        ("softplus", |r| vec![random(r, &[5], -2.0, 2.0)], |g, v| {
            let y = g.softplus(v[0]);
            weighted(g, y, 14)
        }),
        ("square", |r| vec![random(r, &[5], -1.0, 1.0)], |g, v| {
            let y = g.square(v[0]);
            weighted(g, y, 15)
        }),
        ("sum", |r| vec![random(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
            let y = g.sum(v[0], &[0, 2], false)?;
            weighted(g, y, 16)
        }),
        ("mean", |r| vec![random(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
            let y = g.mean(v[0], &[1], true)?;
            weighted(g, y, 17)
        }),
        ("max", |r| vec![random(r, &[3, 4], -1.0, 1.0)], |g, v| {
            let y = g.max(v[0], &[1], false)?;
            weighted(g, y, 18)
        }),
        ("concat", |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 1], -1.0, 1.0)], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted(g, y, 19)
        }),
        ("slice", |r| vec![random(r, &[2, 5, 3], -1.0, 1.0)], |g, v| {
            let y = g.slice(v[0], 1, 1, 3)?;
            weighted(g, y, 20)
        }),
        ("reshape", |r| vec![random(r, &[2, 6], -1.0, 1.0)], |g, v| {
            let y = g.reshape(v[0], [3, 4])?;
            weighted(g, y, 21)
        }),
        ("softmax", |r| vec![random(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.softmax(v[0])?;
            weighted(g, y, 22)
        }),
        ("log_softmax", |r| vec![random(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.log_softmax(v[0])?;
            weighted(g, y, 23)
        }),
    ]
}

fn module_rows<M, F>(prefix: &str, module: &M, f: F) -> Result<Vec<CheckRow>>
where
    M: Module + Clone,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    Ok(param_grad_check(module, EPS, Probes::All, 1e-8, f)?
        .into_iter()
        .map(|c| CheckRow {
            name: format!("{prefix}/{}", c.name),
            max_rel_err: c.max_rel_err,
            tolerance: OPS_TOLERANCE,
        })
        .collect())
}

fn input_row(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<CheckRow> {
    Ok(CheckRow {
        name: name.to_string(),
        max_rel_err: grad_check(inputs, EPS, f)?,
        tolerance: OPS_TOLERANCE,
    })
}

/// Primitive ops (several random instances each), then the linear,
/// convolution, batch-norm, attention-head and LSTM layers with respect to
/// inputs and every parameter, then both correlation losses.
pub fn ops_suite(seed: u64) -> Result<Vec<CheckRow>> {
    with_precision(Precision::F64, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for (name, make, op) in primitives() {
            let mut worst: f64 = 0.0;
            for _ in 0..INSTANCES {
                worst = worst.max(grad_check(&make(&mut rng), EPS, op)?);
            }
            rows.push(CheckRow {
                name: name.to_string(),
                max_rel_err: worst,
                tolerance: OPS_TOLERANCE,
            });
        }

        let mut init = init_rng(seed);

        let linear = Linear::new("linear", 5, 3, &mut init);
        let x = random(&mut rng, &[4, 5], -1.0, 1.0);
        rows.push(input_row("linear/input", std::slice::from_ref(&x), |g, v| {
            let y = linear.forward(g, v[0])?;
            weighted(g, y, 30)
        })?);
        rows.extend(module_rows("linear", &linear, |g, m| {
            let xv = g.constant(&x);
            let y = m.forward(g, xv)?;
            weighted(g, y, 30)
        })?);

        let conv = Conv2d::new("conv", 2, 3, 3, 1, 1, true, &mut init);
        let x = random(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        rows.extend(module_rows("conv", &conv, |g, m| {
            let xv = g.constant(&x);
            let y = m.forward(g, xv)?;
            weighted(g, y, 31)
        })?);

        let mut bn = BatchNorm2d::new("bn", 3);
        bn.training = true;
        let x = random(&mut rng, &[3, 3, 2, 2], -1.0, 1.0);
        rows.push(input_row("batchnorm/input", std::slice::from_ref(&x), |g, v| {
            let y = bn.forward(g, v[0])?;
            weighted(g, y, 32)
        })?);
        rows.extend(module_rows("batchnorm", &bn, |g, m| {
            let xv = g.constant(&x);
            let y = m.forward(g, xv)?;
            weighted(g, y, 32)
        })?);

        let head = CrossAttentionHead::new("attention", 8, 2, &mut init)?;
        let fmap = random(&mut rng, &[2, 8, 3, 3], -1.0, 1.0);
        rows.push(input_row("attention/input", std::slice::from_ref(&fmap), |g, v| {
            let y = head.forward(g, v[0])?;
            weighted(g, y, 33)
        })?);
        rows.extend(module_rows("attention", &head, |g, m| {
            let xv = g.constant(&fmap);
            let y = m.forward(g, xv)?;
            weighted(g, y, 33)
        })?);

        let lstm = LstmLayer::new("lstm", 3, 4, &mut init);
        let seq = random(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let lengths = [3, 2];
        rows.push(input_row("lstm/input", std::slice::from_ref(&seq), |g, v| {
            let y = lstm.forward(g, v[0], &lengths)?;
            weighted(g, y, 34)
        })?);
        rows.extend(module_rows("lstm", &lstm, |g, m| {
            let xv = g.constant(&seq);
            let y = m.forward(g, xv, &lengths)?;
            weighted(g, y, 34)
        })?);

        let target = random(&mut rng, &[6, 7], 0.0, 1.0);
        for kind in [LossKind::Pcc, LossKind::Ccc] {
            let pred = random(&mut rng, &[6, 7], 0.0, 1.0);
            rows.push(input_row(&format!("{kind}_loss"), &[pred], |g, v| {
                let t = g.constant(&target);
                correlation_loss(g, kind, v[0], t)
            })?);
        }
        Ok(rows)
    })
}

#[derive(Clone)]
struct Assembled {
    extractor: MtlDanModel,
    head: EriHead,
}

impl Module for Assembled {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.extractor.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.extractor.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Probes a few coordinates of every trainable parameter of the model
/// built from `cfg`, through the full frames → descriptors → head →
/// correlation-loss path. A frozen extractor contributes no rows.
pub fn model_suite(cfg: &RunConfig, seed: u64, probes_per_tensor: usize) -> Result<Vec<CheckRow>> {
    let (extractor, head) = build_models(cfg)?;
    let model = Assembled { extractor, head };
    let (c, h, w) = cfg.input_size;
    let lengths = [2usize, 1, 2];
    let t_max = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let videos: Vec<Tensor> = lengths.iter().map(|&t| random(&mut rng, &[t, c, h, w], 0.0, 1.0)).collect();
    let target = random(&mut rng, &[lengths.len(), 7], 0.0, 1.0);
    let mode = cfg.descriptor_mode;
    let loss = cfg.loss;
    let checks = param_grad_check(
        &model,
        EPS,
        Probes::Sample { n: probes_per_tensor, seed },
        MODEL_FLOOR,
        |g, m| {
            let mut rows = Vec::new();
            for v in &videos {
                let x = g.constant(v);
                let out = m.extractor.forward(g, x)?;
                let mut d = m.extractor.descriptor(g, &out, mode)?;
                let t = v.shape()[0];
                if t < t_max {
                    let pad = g.full([t_max - t, crate::mtl_dan::DESCRIPTOR_DIM], 0.0);
                    d = g.concat(&[d, pad], 0)?;
                }
                rows.push(g.reshape(d, [1, t_max, crate::mtl_dan::DESCRIPTOR_DIM])?);
            }
            let seqs = g.concat(&rows, 0)?;
            let pred = m.head.forward(g, seqs, &lengths)?;
            let tv = g.constant(&target);
            correlation_loss(g, loss, pred, tv)
        },
    )?;
    Ok(checks
        .into_iter()
        .map(|c| CheckRow {
            name: c.name,
            max_rel_err: c.max_rel_err,
            tolerance: MODEL_TOLERANCE,
        })
        .collect())
}
