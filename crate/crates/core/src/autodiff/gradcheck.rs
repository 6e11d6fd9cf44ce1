use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::{Module, Parameter};
use super::tensor::{with_precision, Precision, Tensor};
use crate::error::Result;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares autodiff gradients of a scalar function against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate, and
/// returns the largest relative error.
///
/// `f` receives one leaf per entry of `inputs`. Runs at 64-bit precision.
/// Callers are responsible for keeping inputs away from kinks (relu at 0,
/// ties under max).
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    with_precision(Precision::F64, || {
        let inputs: Vec<Tensor> = inputs
            .iter()
            .map(|t| {
                Tensor::from_vec(t.shape().to_vec(), t.data().to_vec())
                    .expect("shape already validated")
                    .with_requires_grad(true)
            })
            .collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();

        let eval = |probe: &[Tensor]| -> Result<f64> {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = probe.iter().map(|t| g.constant(t)).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.item(out))
        };

        let mut worst: f64 = 0.0;
        let mut probe = inputs.clone();
        for (ti, t) in inputs.iter().enumerate() {
            for (j, &expected) in analytic[ti].iter().enumerate() {
                let orig = t.data()[j];
                probe[ti].data_mut()[j] = orig + eps;
                let up = eval(&probe)?;
                probe[ti].data_mut()[j] = orig - eps;
                let down = eval(&probe)?;
                probe[ti].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * eps);
                worst = worst.max(relative_error(expected, numeric));
            }
        }
        Ok(worst)
    })
}

/// Result of checking one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub probes: usize,
}

/// Which coordinates of each parameter tensor to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Probes {
    All,
    /// Up to `n` coordinates per tensor, drawn from a seeded stream.
    Sample { n: usize, seed: u64 },
}

fn with_param_mut<M: Module>(module: &mut M, index: usize, f: impl FnOnce(&mut Parameter)) {
    let mut k = 0;
    let mut f = Some(f);
    module.visit_mut(&mut |p| {
        if k == index {
            if let Some(f) = f.take() {
                f(p);
            }
        }
        k += 1;
    });
}

/// Finite-difference check of the gradients a module's parameters receive
/// from the scalar `f`. Frozen parameters and buffers are skipped, so they
/// produce no row. Runs at 64-bit precision; `floor` is the smallest
/// denominator used in the relative error.
pub fn param_grad_check<M, F>(module: &M, eps: f64, probes: Probes, floor: f64, f: F) -> Result<Vec<ParamCheck>>
where
    M: Module + Clone,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    with_precision(Precision::F64, || {
        let mut g = Graph::new();
        let loss = f(&mut g, module)?;
        g.backward(loss)?;

        let eval = |m: &M| -> Result<f64> {
            let mut g = Graph::no_grad();
            let out = f(&mut g, m)?;
            Ok(g.item(out))
        };

        let mut work = module.clone();
        let mut rows = Vec::new();
        for (pi, p) in module.parameters().into_iter().enumerate() {
            if p.is_buffer() || p.is_frozen() {
                continue;
            }
            let n = p.tensor.numel();
            let analytic = g.param_grad(p.id()).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
            let coords: Vec<usize> = match probes {
                Probes::All => (0..n).collect(),
                Probes::Sample { n: k, seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let mut idx = sample(&mut rng, n, k.min(n)).into_vec();
                    idx.sort_unstable();
                    idx
                }
            };
            let mut worst: f64 = 0.0;
            for &j in &coords {
                let orig = p.tensor.data()[j];
                with_param_mut(&mut work, pi, |q| q.tensor.data_mut()[j] = orig + eps);
                let up = eval(&work)?;
                with_param_mut(&mut work, pi, |q| q.tensor.data_mut()[j] = orig - eps);
                let down = eval(&work)?;
                with_param_mut(&mut work, pi, |q| q.tensor.data_mut()[j] = orig);
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[j];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            }
            rows.push(ParamCheck {
                name: p.name().to_string(),
                max_rel_err: worst,
                probes: coords.len(),
            });
        }
        Ok(rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // f(θ) = θᵀAθ with A = [[2,1],[1,3]]
        let theta = Tensor::from_vec([2, 1], vec![0.7, -1.3]).unwrap();
        let a = Tensor::from_vec([2, 2], vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let err = grad_check(&[theta], 1e-5, |g, v| {
            let a = g.constant(&a);
            let at = g.matmul(a, v[0])?;
            let prod = g.mul(at, v[0])?;
            Ok(g.sum_all(prod))
        })
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
