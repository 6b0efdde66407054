use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            ..Adam::default()
        }
    }
}

/// First and second moment estimates for every parameter in a store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: Adam,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: Adam, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter, then clears the
    /// gradients. Fails without touching anything if a gradient is missing.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::State(format!(
                "state tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {} has no gradient", p.name)));
        }

        self.step += 1;
        let Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take().expect("checked above");
            for (((theta, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, ParamKind};

    fn scalar_store(theta: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", ParamKind::Weight, Tensor::scalar(theta));
        (s, id)
    }

    /// Plain scalar Adam written from the textbook update, used as an oracle.
    fn reference_adam(mut theta: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        theta
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = scalar_store(0.0);
        let mut state = AdamState::new(Adam::with_learning_rate(0.001), &store);
        store.accumulate_grads([(id, Tensor::scalar(1.0))]);
        state.step(&mut store).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-18);
        assert!(store.get(id).grad.is_none());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut store, id) = scalar_store(1.25);
        let mut state = AdamState::new(Adam::default(), &store);
        store.accumulate_grads([(id, Tensor::scalar(0.0))]);
        state.step(&mut store).unwrap();
        assert_eq!(store.value(id).data()[0], 1.25);
    }

    #[test]
    fn two_constant_steps_match_reference() {
        let (mut store, id) = scalar_store(0.3);
        let mut state = AdamState::new(Adam::with_learning_rate(0.01), &store);
        for _ in 0..2 {
            store.accumulate_grads([(id, Tensor::scalar(0.7))]);
            state.step(&mut store).unwrap();
        }
        let expected = reference_adam(0.3, &[0.7, 0.7], 0.01);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let (mut store, id) = scalar_store(-0.123456789);
        let before = store.value(id).data()[0].to_bits();
        let mut state = AdamState::new(Adam::with_learning_rate(0.0), &store);
        for g in [1.0, -5.0, 1e6] {
            store.accumulate_grads([(id, Tensor::scalar(g))]);
            state.step(&mut store).unwrap();
        }
        assert_eq!(store.value(id).data()[0].to_bits(), before);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let (mut store, _) = scalar_store(0.0);
        let mut state = AdamState::new(Adam::default(), &store);
        assert!(matches!(state.step(&mut store), Err(Error::State(_))));
        assert_eq!(state.step_count(), 0);
    }
}
