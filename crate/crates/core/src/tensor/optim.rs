use super::params::{ParamGrads, ParamStore};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW with decoupled weight decay and per-parameter bias correction.
///
/// Parameters whose gradient is `None` are left untouched: no decay, no
/// moment update, no step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<Option<AdamWState>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            states: vec![None; store.len()],
        }
    }

    pub fn states(&self) -> &[Option<AdamWState>] {
        &self.states
    }

    pub fn set_states(&mut self, states: Vec<Option<AdamWState>>) {
        self.states = states;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let state = self.states[id.index()].get_or_insert_with(|| AdamWState {
                step: 0,
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            state.step += 1;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *w -= lr * weight_decay * *w;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
