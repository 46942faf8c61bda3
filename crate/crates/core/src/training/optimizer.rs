//! Adaptive-moment optimizer with decoupled weight decay.

use ndarray::ArrayD;

use crate::autodiff::Arr;
use crate::config::OptimizerConfig;
use crate::params::ParamStore;

pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Arr>,
    v: Vec<Arr>,
    step: u64,
    eps: f64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect();
        let v = store.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect();
        AdamW { cfg, m, v, step: 0, eps: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all trainable entries; `grads` is indexed like the
    /// store. Buffers (non-trainable entries) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Arr]) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.cfg.lr;
        let wd = self.cfg.weight_decay;

        for (i, entry) in store.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            });
            let eps = self.eps;
            ndarray::Zip::from(&mut entry.value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    // decoupled weight decay
                    *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn store_with(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", ArrayD::from_elem(IxDyn(&[2]), value), true);
        s.add("buffer", ArrayD::from_elem(IxDyn(&[2]), 5.0), false);
        s
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut store = store_with(1.25);
        let before: Vec<u64> = store.value(0).iter().map(|v| v.to_bits()).collect();
        let cfg = OptimizerConfig { lr: 0.0, beta1: 0.5, beta2: 0.999, weight_decay: 0.01 };
        let mut opt = AdamW::new(cfg, &store);
        let grads = vec![
            ArrayD::from_elem(IxDyn(&[2]), 3.0),
            ArrayD::zeros(IxDyn(&[2])),
        ];
        opt.step(&mut store, &grads);
        let after: Vec<u64> = store.value(0).iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn gradient_descent_direction() {
        let mut store = store_with(1.0);
        let cfg = OptimizerConfig { lr: 0.1, beta1: 0.5, beta2: 0.999, weight_decay: 0.0 };
        let mut opt = AdamW::new(cfg, &store);
        let grads = vec![
            ArrayD::from_elem(IxDyn(&[2]), 1.0),
            ArrayD::zeros(IxDyn(&[2])),
        ];
        opt.step(&mut store, &grads);
        assert!(store.value(0)[[0]] < 1.0);
        // buffers untouched
        assert_eq!(store.value(1)[[0]], 5.0);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut store = store_with(2.0);
        let cfg = OptimizerConfig { lr: 0.1, beta1: 0.5, beta2: 0.999, weight_decay: 0.5 };
        let mut opt = AdamW::new(cfg, &store);
        let grads = vec![ArrayD::zeros(IxDyn(&[2])), ArrayD::zeros(IxDyn(&[2]))];
        opt.step(&mut store, &grads);
        let w = store.value(0)[[0]];
        assert!((w - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
