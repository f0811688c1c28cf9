//! Bias-corrected Adam with global-norm gradient clipping.

use super::params::{Gradients, ParamStore};
use crate::error::DnbpError;

/// Optimizer state: one first/second moment buffer per parameter tensor,
/// aligned with [`ParamStore`] order.
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        assert!(lr >= 0.0, "learning rate must be non-negative");
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: store.ids().map(|id| vec![0.0; store.tensor(id).numel()]).collect(),
            v: store.ids().map(|id| vec![0.0; store.tensor(id).numel()]).collect(),
        }
    }

    pub fn first_moment(&self, slot: usize) -> &[f32] {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[f32] {
        &self.v[slot]
    }
}

/// Scale gradients so the global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f32) {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients without
/// touching parameters or moments.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<(), DnbpError> {
    if grads.slots.len() != state.m.len() {
        return Err(DnbpError::Numeric(format!(
            "gradient slot count {} does not match optimizer state {}",
            grads.slots.len(),
            state.m.len()
        )));
    }
    if !grads.is_finite() {
        return Err(DnbpError::Numeric("non-finite gradient; optimizer step rejected".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (slot, id) in store.ids().enumerate().map(|(i, id)| (i, id)).collect::<Vec<_>>() {
        let g = &grads.slots[slot];
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let p = store.tensor_mut(id).data_mut();
        debug_assert_eq!(g.len(), p.len());
        for k in 0..p.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;

    fn single_param_store(value: f32) -> (ParamStore, crate::diffcore::params::ParamId) {
        let mut store = ParamStore::new();
        let g = store.group("test");
        let id = store.add(g, "p", Tensor::new(vec![1], vec![value]));
        (store, id)
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let (mut store, id) = single_param_store(0.0);
        let mut state = AdamState::new(&store, 1e-3);
        let grads = Gradients { slots: vec![vec![1.0]] };
        adam_step(&mut store, &grads, &mut state).unwrap();
        // m=0.1, v=0.001, m_hat=1, v_hat=1 => delta = -lr/(1+eps)
        let expected = -1e-3_f64 / (1.0 + 1e-8);
        let got = store.tensor(id).data()[0] as f64;
        assert!((got - expected).abs() < 1e-9, "got {got}, expected {expected}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = single_param_store(0.75);
        let mut state = AdamState::new(&store, 1e-2);
        let grads = Gradients { slots: vec![vec![0.0]] };
        for _ in 0..5 {
            adam_step(&mut store, &grads, &mut state).unwrap();
        }
        assert_eq!(store.tensor(id).data()[0], 0.75);
    }

    #[test]
    fn two_steps_follow_recurrence_exactly() {
        let (mut store, id) = single_param_store(0.0);
        let mut state = AdamState::new(&store, 1e-3);
        let grads = Gradients { slots: vec![vec![1.0]] };
        adam_step(&mut store, &grads, &mut state).unwrap();
        adam_step(&mut store, &grads, &mut state).unwrap();
        assert_eq!(state.step_count, 2);

        // Hand recurrence in f32, mirroring the implementation order.
        let (b1, b2, lr, eps) = (0.9f32, 0.999f32, 1e-3f32, 1e-8f32);
        let mut m = 0.0f32;
        let mut v = 0.0f32;
        let mut p = 0.0f32;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert_eq!(store.tensor(id).data()[0], p);
        assert_eq!(state.first_moment(0)[0], m);
        assert_eq!(state.second_moment(0)[0], v);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut store, id) = single_param_store(1.0);
        let mut state = AdamState::new(&store, 1e-3);
        let grads = Gradients { slots: vec![vec![f32::NAN]] };
        assert!(adam_step(&mut store, &grads, &mut state).is_err());
        assert_eq!(store.tensor(id).data()[0], 1.0);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = Gradients { slots: vec![vec![30.0, 40.0]] };
        clip_global_norm(&mut grads, 10.0);
        let norm = grads.global_norm();
        assert!((norm - 10.0).abs() < 1e-4, "norm after clip {norm}");
        assert!((grads.slots[0][0] - 6.0).abs() < 1e-4);
    }
}
