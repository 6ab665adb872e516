use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Restores state saved from an earlier run.
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments>) {
        self.step = step;
        self.moments = moments;
    }

    /// Applies one update from `grads`, scaled by `scale` (used for clipping).
    pub fn apply(&mut self, store: &ParamStore, grads: &GradStore, scale: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            let (m, v) = match self.moments.get(name) {
                Some(Moments { m, v }) => (
                    ((m * b1)? + (&g * (1.0 - b1))?)?,
                    ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                ),
                None => ((&g * (1.0 - b1))?, (g.sqr()? * (1.0 - b2))?),
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + eps)?)?;
            let next = (var.as_tensor() - (update * lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), Moments { m, v });
        }
        Ok(())
    }
}

/// L2 norm over every parameter gradient in `grads`.
pub fn global_grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut total = 0f64;
    for var in store.params().values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Factor that brings a gradient of norm `norm` down to at most `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / (norm + 1e-6)
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamBuilder};
    use candle_core::DType;

    fn quadratic() -> (ParamStore, Tensor) {
        let pb = ParamBuilder::new(0, DType::F64);
        let x = pb.param("x", &[3], Init::Uniform(2.0)).unwrap();
        (pb.finish(), x)
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let (store, x) = quadratic();
        let before = x.to_vec1::<f64>().unwrap();
        let grads = x.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        opt.apply(&store, &grads, 1.0).unwrap();
        // bias-corrected first step is lr * sign(g) up to eps
        let after = store.get("x").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!((b - a - 0.1 * b.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn converges_on_a_quadratic() {
        let (store, x) = quadratic();
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        for _ in 0..500 {
            let grads = x.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.apply(&store, &grads, 1.0).unwrap();
        }
        let v = x.to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn clipping_scale() {
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
        assert!((clip_scale(4.0, 1.0) * 4.0 - 1.0).abs() < 1e-6);
        assert_eq!(clip_scale(4.0, 0.0), 1.0);
    }

    #[test]
    fn norm_of_known_gradient() {
        let (store, x) = quadratic();
        let grads = x.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let v = x.to_vec1::<f64>().unwrap();
        let want = v.iter().map(|c| 4.0 * c * c).sum::<f64>().sqrt();
        assert!((global_grad_norm(&store, &grads).unwrap() - want).abs() < 1e-12);
    }
}
