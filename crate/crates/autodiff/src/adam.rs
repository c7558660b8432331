//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::params::{GradSet, ParamSet};
use crate::Real;

/// What to do when a gradient contains NaN or infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NonFinitePolicy {
    /// Leave every parameter untouched and count the skipped step.
    #[default]
    Skip,
    /// Return an error.
    Reject,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub non_finite: NonFinitePolicy,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            non_finite: NonFinitePolicy::Skip,
        }
    }
}

/// First/second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied to this parameter.
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub slots: BTreeMap<String, Moments<T>>,
    pub skipped_steps: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
            skipped_steps: 0,
        }
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) -> Result<StepOutcome> {
        for (name, g) in grads {
            let Some(p) = params.get(name) else {
                return Err(AutodiffError::Invalid {
                    op: "adam_step",
                    detail: format!("gradient for unknown parameter `{name}`"),
                });
            };
            if p.numel() != g.len() {
                return Err(AutodiffError::Shape {
                    op: "adam_step",
                    detail: format!("`{name}` has {} values, gradient has {}", p.numel(), g.len()),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                match self.config.non_finite {
                    NonFinitePolicy::Skip => {
                        self.skipped_steps += 1;
                        return Ok(StepOutcome::Skipped);
                    }
                    NonFinitePolicy::Reject => return Err(AutodiffError::NonFinite(name.clone())),
                }
            }
        }

        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_m_b1, one_m_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.epsilon));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
                step: 0,
            });
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = T::lit(1.0 - c.beta1.powi(t));
            let bc2 = T::lit(1.0 - c.beta2.powi(t));
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut slot.m).zip(&mut slot.v) {
                *m = b1 * *m + one_m_b1 * gi;
                *v = b2 * *v + one_m_b2 * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([1], vec![value]).unwrap());
        p
    }

    fn grad(value: f64) -> GradSet<f64> {
        GradSet::from([("w".to_string(), vec![value])])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p, &grad(1.0)).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.slots["w"].step, 1);
        assert!((adam.slots["w"].m[0] - 0.1).abs() < 1e-15);
        assert!((adam.slots["w"].v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_fixed_point() {
        let mut p = single(0.7);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
        assert_eq!(adam.slots["w"].m[0], 0.0);
        assert_eq!(adam.slots["w"].step, 5);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = single(0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p, &grad(1.0)).unwrap();
        adam.step(&mut p, &grad(0.0)).unwrap();
        assert!((adam.slots["w"].m[0] - 0.09).abs() < 1e-15);
        assert!((adam.slots["w"].v[0] - 0.001 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn identical_params_and_grads_stay_identical() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new([2], vec![0.3, -0.2]).unwrap());
        p.insert("b", Tensor::new([2], vec![0.3, -0.2]).unwrap());
        let mut adam = AdamState::new(AdamConfig::default());
        for s in 0..10 {
            let g = vec![0.1 * s as f64, -0.5];
            let grads = GradSet::from([("a".to_string(), g.clone()), ("b".to_string(), g)]);
            adam.step(&mut p, &grads).unwrap();
        }
        assert_eq!(p.get("a"), p.get("b"));
    }

    #[test]
    fn non_finite_gradient_is_skipped_or_rejected() {
        let mut p = single(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        assert_eq!(adam.step(&mut p, &grad(f64::NAN)).unwrap(), StepOutcome::Skipped);
        assert_eq!(adam.skipped_steps, 1);
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
        assert!(adam.slots.is_empty());

        let mut strict = AdamState::new(AdamConfig {
            non_finite: NonFinitePolicy::Reject,
            ..AdamConfig::default()
        });
        assert!(matches!(
            strict.step(&mut p, &grad(f64::INFINITY)),
            Err(AutodiffError::NonFinite(_))
        ));
    }

    #[test]
    fn step_counter_increments_per_update() {
        let mut p = single(0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        for expected in 1..=4 {
            adam.step(&mut p, &grad(0.5)).unwrap();
            assert_eq!(adam.slots["w"].step, expected);
        }
    }
}
