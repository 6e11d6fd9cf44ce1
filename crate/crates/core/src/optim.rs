use std::collections::BTreeMap;

use crate::autodiff::{Module, Precision};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment estimates are keyed by parameter name,
/// so the optimizer survives model clones.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter of `module` that holds
    /// a gradient, then clears all gradients. Frozen parameters and buffers
    /// are never touched.
    pub fn step(&mut self, module: &mut dyn Module) {
        self.step_all(&mut [module]);
    }

    /// One update across several modules sharing this optimizer's step count.
    pub fn step_all(&mut self, modules: &mut [&mut dyn Module]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let precision = Precision::current();
        let moments = &mut self.moments;
        for module in modules.iter_mut() {
        module.visit_mut(&mut |p| {
            if p.is_buffer() || p.is_frozen() {
                return;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                return;
            };
            let n = grad.len();
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w = precision.round(*w - update);
            }
            p.tensor.zero_grad();
        });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Parameter, Tensor};

    struct One(Parameter);

    impl Module for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
            f(&self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
            f(&mut self.0);
        }
    }

    fn grad_step(m: &mut One, opt: &mut Adam) {
        let mut g = Graph::new();
        let x = g.param(&m.0);
        let sq = g.square(x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        m.absorb(&g);
        opt.step(m);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = One(Parameter::new("w", Tensor::from_vec([2], vec![1.0, -2.0]).unwrap()));
        let mut opt = Adam::with_lr(0.1);
        grad_step(&mut m, &mut opt);
        // bias-corrected first step is lr·sign(g)
        let d = m.0.tensor.data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.9).abs() < 1e-6, "{d:?}");
        assert!(m.0.tensor.grad().is_none());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut m = One(Parameter::new("w", Tensor::from_vec([2], vec![1.0, -2.0]).unwrap()));
        let before = m.parameter_bytes();
        let mut opt = Adam::with_lr(0.0);
        for _ in 0..3 {
            grad_step(&mut m, &mut opt);
        }
        assert_eq!(before, m.parameter_bytes());
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut m = One(Parameter::new("w", Tensor::from_vec([1], vec![1.0]).unwrap()));
        m.0.set_frozen(true);
        let mut opt = Adam::with_lr(0.5);
        grad_step(&mut m, &mut opt);
        assert_eq!(m.0.tensor.data(), &[1.0]);
    }
}
