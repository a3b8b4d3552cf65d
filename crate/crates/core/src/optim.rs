use crate::error::{contract_err, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `base_lr`, constant afterwards.
pub fn warmup_lr(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup_steps as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-4,
            warmup_steps: 1000,
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S = f32> {
    pub config: AdamConfig,
    pub first: Vec<Vec<S>>,
    pub second: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<S>> = store.iter().map(|(_, _, t)| vec![S::zero(); t.numel()]).collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        warmup_lr(self.step.max(1), self.config.base_lr, self.config.warmup_steps)
    }

    /// One update of every trainable parameter from its gradient slot.
    /// Frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(contract_err!(
                "optimizer tracks {} tensors but the store has {}",
                self.first.len(),
                store.len()
            ));
        }
        for id in store.ids() {
            if store.is_trainable(id) && store.get(id).grad().is_none() {
                return Err(contract_err!("parameter {} has no gradient", store.name(id)));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = S::lit(warmup_lr(self.step, c.base_lr, c.warmup_steps));
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let correct1 = S::one() / (S::one() - b1.powi(t));
        let correct2 = S::one() / (S::one() - b2.powi(t));
        let wd = S::lit(c.weight_decay);
        let eps = S::lit(ADAM_EPS);
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let tensor = store.get_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            if m.len() != grad.len() {
                return Err(contract_err!(
                    "moment buffer shape differs for parameter {}",
                    id.index()
                ));
            }
            for (((p, &g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                let m_hat = *mi * correct1;
                let v_hat = *vi * correct2;
                *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}
