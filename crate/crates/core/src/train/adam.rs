//! Adam with decoupled-into-gradient weight decay.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{ParamId, ParamStore};

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = store
            .ids()
            .map(|id| ArrayD::zeros(IxDyn(store.value(id).shape())))
            .collect();
        let v = store
            .ids()
            .map(|id| ArrayD::zeros(IxDyn(store.value(id).shape())))
            .collect();
        Adam {
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    /// Apply one update. `grads` holds mean gradients per parameter; `None`
    /// entries (parameters outside the current graph) are skipped, as are
    /// parameters not matching `only_prefix` when a stage freezes the rest.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Option<ArrayD<f64>>)],
        lr: f64,
        only_prefix: Option<&str>,
    ) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (id, grad) in grads {
            let Some(grad) = grad else { continue };
            if let Some(prefix) = only_prefix {
                if !store.name(*id).starts_with(prefix) {
                    continue;
                }
            }
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let value = store.value_mut(*id);
            let vf = value.as_slice_mut().unwrap();
            let gf = grad.as_slice().unwrap();
            let mf = m.as_slice_mut().unwrap();
            let vvf = v.as_slice_mut().unwrap();
            for i in 0..vf.len() {
                let g = gf[i] + self.weight_decay * vf[i];
                mf[i] = self.beta1 * mf[i] + (1.0 - self.beta1) * g;
                vvf[i] = self.beta2 * vvf[i] + (1.0 - self.beta2) * g * g;
                let m_hat = mf[i] / bc1;
                let v_hat = vvf[i] / bc2;
                vf[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for id in store.ids() {
            out.push((format!("optim.m.{}", store.name(id)), &self.m[id.0]));
            out.push((format!("optim.v.{}", store.name(id)), &self.v[id.0]));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        store: &ParamStore,
        tensors: &std::collections::HashMap<String, ArrayD<f64>>,
        step_count: u64,
    ) {
        self.step_count = step_count;
        for id in store.ids() {
            if let Some(m) = tensors.get(&format!("optim.m.{}", store.name(id))) {
                self.m[id.0] = m.clone();
            }
            if let Some(v) = tensors.get(&format!("optim.v.{}", store.name(id))) {
                self.v[id.0] = v.clone();
            }
        }
    }
}
