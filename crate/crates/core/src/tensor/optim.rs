use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay.
///
/// Parameters whose gradient is `None` are skipped entirely for that step
/// (no moment update and no decay), matching the usual framework behaviour.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moments, one vector per parameter slot.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuild an optimizer mid-run; moment lengths must match `store`.
    pub fn restore(
        config: AdamWConfig,
        store: &ParamStore,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> crate::Result<Self> {
        let fits = |x: &[Vec<f64>]| {
            x.len() == store.len() && x.iter().zip(store.entries()).all(|(a, e)| a.len() == e.tensor.numel())
        };
        if !fits(&m) || !fits(&v) {
            return Err(crate::Error::Load("optimizer moments do not match the parameters".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (entry, grad)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if !entry.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = entry.tensor.data_mut();
            for i in 0..p.len() {
                let gi = grad.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * c.weight_decay * p[i];
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), true);
        let before = store.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..5 {
            opt.step(&mut store, &[Some(Tensor::zeros(&[3]))]);
        }
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap(), true);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                eps: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, &[Some(Tensor::new(vec![1], vec![4.0]).unwrap())]);
        assert!((store.entries()[0].tensor.data()[0] - (1.0 - 3e-4)).abs() < 1e-12);
    }

    #[test]
    fn buffers_are_never_updated() {
        let mut store = ParamStore::new();
        store.add("running", Tensor::full(&[2], 1.0), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[Some(Tensor::full(&[2], 1.0))]);
        assert_eq!(store.entries()[0].tensor.data(), &[1.0, 1.0]);
    }
}
