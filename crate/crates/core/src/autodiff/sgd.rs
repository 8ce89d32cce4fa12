use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// SGD with momentum and step decay at fixed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// 0-based epoch indices at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.002, momentum: 0.9, decay_epochs: vec![10, 12], decay_factor: 0.1 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Config(format!("decay factor must be positive, got {}", self.decay_factor)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

pub struct Sgd<T> {
    config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        let velocity = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { config, velocity }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// `v <- m v + g; p <- p - lr(epoch) v`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], epoch: usize) {
        assert_eq!(grads.len(), self.velocity.len(), "one gradient per parameter");
        let lr = T::c(self.config.lr_at(epoch));
        let m = T::c(self.config.momentum);
        for ((id, v), g) in params.ids().zip(&mut self.velocity).zip(grads) {
            let p = params.get_mut(id);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = m * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_after_epochs_10_and_12() {
        let c = SgdConfig::default();
        assert_eq!(c.lr_at(0), 0.002);
        assert_eq!(c.lr_at(9), 0.002);
        assert!((c.lr_at(10) - 0.0002).abs() < 1e-15);
        assert!((c.lr_at(11) - 0.0002).abs() < 1e-15);
        assert!((c.lr_at(12) - 0.00002).abs() < 1e-16);
    }

    #[test]
    fn zero_grad_is_noop_and_unit_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_fn(&[3], |i| i as f64));
        let before = store.clone();
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.0, ..Default::default() };
        let mut sgd = Sgd::new(cfg, &store);
        sgd.step(&mut store, &[Tensor::zeros(&[3])], 0);
        assert_eq!(store, before);
        sgd.step(&mut store, &[Tensor::full(&[3], 1.0)], 0);
        for (a, b) in store.get(id).data().iter().zip(before.get(id).data()) {
            assert!((b - a - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn validation() {
        assert!(SgdConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
