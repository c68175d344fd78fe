//! Adaptive-moment optimizer and exponential learning-rate decay.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpDecay {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl ExpDecay {
    pub fn new(start: f64, end: f64, steps: usize) -> Result<Self> {
        if !(start > 0.0 && end > 0.0) {
            return Err(Error::Invalid(format!("learning rates must be positive: {start} -> {end}")));
        }
        Ok(Self { start, end, steps })
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            start: lr,
            end: lr,
            steps: 1,
        }
    }

    /// `start·(end/start)^(step/steps)`; equals `end` at `step == steps`.
    pub fn at(&self, step: usize) -> f64 {
        if self.steps == 0 || self.start == self.end {
            return self.end;
        }
        if step >= self.steps {
            return self.end;
        }
        self.start * (self.end / self.start).powf(step as f64 / self.steps as f64)
    }
}

/// Per-group learning rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub features: ExpDecay,
    pub vis_features: ExpDecay,
    pub network: ExpDecay,
    pub embedding: ExpDecay,
}

impl LearningRates {
    pub fn for_steps(steps: usize) -> Self {
        Self {
            features: ExpDecay::constant(2.5e-3),
            vis_features: ExpDecay::constant(1.0e-3),
            network: ExpDecay { start: 8.0e-4, end: 5.0e-6, steps },
            embedding: ExpDecay { start: 5.0e-3, end: 5.0e-5, steps },
        }
    }

    pub fn get(&self, group: ParamGroup) -> &ExpDecay {
        match group {
            ParamGroup::Features => &self.features,
            ParamGroup::VisFeatures => &self.vis_features,
            ParamGroup::Network => &self.network,
            ParamGroup::Embedding => &self.embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<ParamId, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates one tensor in place; `id` selects its moment slot.
    pub fn update(&mut self, id: ParamId, param: &mut [f64], grad: &[f64], lr: f64) {
        let slot = self.state.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        slot.t += 1;
        let c1 = 1.0 - self.beta1.powi(slot.t as i32);
        let c2 = 1.0 - self.beta2.powi(slot.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = slot.m[i] / c1;
            let v_hat = slot.v[i] / c2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Applies one step to every parameter that received a gradient.
    /// Returns `false` (and changes nothing) when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, rates: &LearningRates, iteration: usize) -> bool {
        if !grads.is_finite() {
            log::warn!("skipping step {iteration}: non-finite gradient");
            return false;
        }
        for (id, g) in grads.iter() {
            let lr = rates.get(store.key(id).group()).at(iteration);
            self.update(id, store.value_mut(id), g, lr);
        }
        true
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new();
        let mut p = vec![0.3, -0.2];
        adam.update(0, &mut p, &[0.0, 0.0], 1e-3);
        assert_eq!(p, vec![0.3, -0.2]);
    }

    #[test]
    fn first_step_is_learning_rate() {
        let lr = 1e-4;
        let mut adam = Adam::new();
        let mut p = vec![1.0];
        adam.update(0, &mut p, &[1.0], lr);
        let delta = p[0] - 1.0;
        assert!((delta + lr).abs() < 1e-12);
        assert!((delta + lr / (1.0 + adam.eps)).abs() < 1e-15);
    }

    #[test]
    fn decay_hits_endpoints() {
        let d = ExpDecay::new(8e-4, 5e-6, 10_000).unwrap();
        assert_eq!(d.at(0), 8e-4);
        assert!((d.at(10_000) - 5e-6).abs() < 1e-9);
        let unclamped = d.start * (d.end / d.start).powf(1.0);
        assert!((unclamped - 5e-6).abs() < 1e-9);
        assert!(d.at(5_000) < d.at(4_999));
        assert!(ExpDecay::new(0.0, 1.0, 5).is_err());
    }

    #[test]
    fn separate_slots_count_steps_independently() {
        let mut adam = Adam::new();
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        adam.update(0, &mut a, &[1.0], 0.1);
        adam.update(0, &mut a, &[1.0], 0.1);
        adam.update(1, &mut b, &[1.0], 0.1);
        assert_eq!((adam.step_count(0), adam.step_count(1)), (2, 1));
    }
}
