use std::collections::BTreeMap;

use crate::array::DiffArray;
use crate::error::{invalid, DiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Bias-corrected Adam with per-parameter moment buffers keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, reading gradients from each
    /// array's `grad` (a missing gradient counts as zero).
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut DiffArray)>,
    {
        let step = self.step.checked_add(1).ok_or(DiffError::StepOverflow)?;
        let params: Vec<_> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(m) = self.moments.get(*name) {
                if m.first.len() != p.len() {
                    return Err(invalid(
                        "adam_step",
                        format!("parameter {name} has {} elements, state has {}", p.len(), m.first.len()),
                    ));
                }
            }
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = i32::try_from(step).unwrap_or(i32::MAX);
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (name, p) in params {
            let n = p.len();
            let moments = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let (data, grad) = p.data_and_grad_mut();
            let Some(grad) = grad else {
                for ((x, m), v) in data.iter_mut().zip(&mut moments.first).zip(&mut moments.second) {
                    *m *= beta1;
                    *v *= beta2;
                    *x -= learning_rate * (*m / bias1) / ((*v / bias2).sqrt() + epsilon);
                }
                continue;
            };
            for (((x, m), v), &g) in data.iter_mut().zip(&mut moments.first).zip(&mut moments.second).zip(grad) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= learning_rate * (*m / bias1) / ((*v / bias2).sqrt() + epsilon);
            }
        }
        self.step = step;
        Ok(())
    }

    #[cfg(test)]
    fn force_step(&mut self, step: u64) {
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> DiffArray {
        DiffArray::scalar(v).with_grad()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(0.3);
        p.set_grad(vec![-4.2]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step([("w", &mut p)]).unwrap();
        assert!((p.data()[0] - (0.3 + 1e-3)).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = param(0.7);
        p.set_grad(vec![0.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step([("w", &mut p)]).unwrap();
        }
        assert_eq!(p.data()[0], 0.7);
    }

    #[test]
    fn quadratic_decreases_over_two_steps() {
        // f(w) = w², f'(w) = 2w
        let mut p = param(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut values = vec![1.0];
        for _ in 0..2 {
            let w = p.data()[0];
            p.set_grad(vec![2.0 * w]).unwrap();
            adam.step([("w", &mut p)]).unwrap();
            let w = p.data()[0];
            values.push(w * w);
        }
        assert!(values[1] < values[0] && values[2] < values[1], "{values:?}");
    }

    #[test]
    fn counter_overflow_rejected() {
        let mut p = param(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.force_step(u64::MAX);
        assert_eq!(adam.step([("w", &mut p)]), Err(DiffError::StepOverflow));
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn shape_change_rejected() {
        let mut p = param(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step([("w", &mut p)]).unwrap();
        let mut wider = DiffArray::zeros(vec![2]).unwrap().with_grad();
        assert!(adam.step([("w", &mut wider)]).is_err());
    }
}
