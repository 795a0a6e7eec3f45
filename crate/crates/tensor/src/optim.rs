use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN/inf; no parameter or moment was touched.
    Skipped {
        param: ParamId,
    },
}

/// AdamW with decoupled weight decay: each step first shrinks `w` by
/// `lr·wd·w`, then applies the bias-corrected Adam update.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = store.ids().map(|id| vec![T::zero(); store.get(id).len()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// Rebuilds an optimizer from saved moments (checkpoint resume).
    pub fn from_state(config: AdamWConfig, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Self {
        Self { config, step, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// One update. `grads[i]` must match parameter `i` of `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<StepOutcome> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(invalid("adamw", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(invalid(
                    "adamw",
                    format!("gradient shape {:?} for parameter {}", g.shape(), store.name(id)),
                ));
            }
        }
        if let Some(bad) = store.ids().zip(grads).find(|(_, g)| !g.is_finite()) {
            return Ok(StepOutcome::Skipped { param: bad.0 });
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (s::<T>(c.beta1), s::<T>(c.beta2));
        let one = T::one();
        let lr_t = s::<T>(lr);
        let decay = one - lr_t * s::<T>(c.weight_decay);
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        let eps = s::<T>(c.eps);
        for (id, g) in store.ids().zip(grads) {
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            let w = store.data_mut(id);
            for j in 0..w.len() {
                let gj = g.data()[j];
                w[j] *= decay;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Cosine decay from `lr0` at step 0 to `lr_min` at `total_steps`; steps past
/// the end stay at `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if total_steps == 0 { lr0 } else { lr_min };
    }
    let progress = step as f64 / total_steps as f64;
    lr_min + (lr0 - lr_min) * (1.0 + (PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut st = ParamStore::new();
        let id = st.add("w", Tensor::from_f64(&[values.len()], values).unwrap());
        (st, id)
    }

    #[test]
    fn zero_gradient_only_decays() {
        let (mut st, id) = store(&[1.0]);
        let mut opt = AdamW::new(&st, AdamWConfig::default());
        let out = opt.step(&mut st, &[Tensor::zeros(&[1])], 0.001).unwrap();
        assert_eq!(out, StepOutcome::Applied);
        assert!((st.get(id).item() - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_against_sign_at_rate_lr() {
        let (mut st, id) = store(&[0.0, 0.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&st, cfg);
        let g = Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap();
        let mut prev = st.get(id).clone();
        for _ in 0..200 {
            opt.step(&mut st, &[g.clone()], 0.01).unwrap();
            let now = st.get(id).clone();
            let d0 = now.data()[0] - prev.data()[0];
            let d1 = now.data()[1] - prev.data()[1];
            assert!(d0 < 0.0 && d1 > 0.0);
            assert!((d0.abs() - 0.01).abs() < 1e-6 && (d1.abs() - 0.01).abs() < 1e-6);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let (mut st, id) = store(&[0.5]);
        let mut opt = AdamW::new(&st, AdamWConfig::default());
        let out = opt.step(&mut st, &[Tensor::from_f64(&[1], &[f64::NAN]).unwrap()], 0.1).unwrap();
        assert_eq!(out, StepOutcome::Skipped { param: id });
        assert_eq!(st.get(id).item(), 0.5);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.001, 0.0), 0.001);
        assert!((cosine_lr(50, 100, 0.001, 0.0) - 0.0005).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 0.001, 0.0).abs() < 1e-18);
        assert_eq!(cosine_lr(250, 100, 0.001, 0.0), 0.0);
        let mut last = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(t, 100, 0.001, 0.0);
            assert!(lr <= last);
            last = lr;
        }
    }
}
